use std::env;
use std::fs;
use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/capi.rs");
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("reading cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generating include/psm.h");

    let mut generated = Vec::new();
    bindings.write(&mut generated);

    // Rewrite only on change so downstream rebuilds don't churn.
    let header = crate_dir.join("include").join("psm.h");
    if fs::read(&header).ok().as_deref() != Some(&generated[..]) {
        fs::create_dir_all(header.parent().unwrap()).unwrap();
        fs::write(&header, &generated).unwrap();
    }
}
