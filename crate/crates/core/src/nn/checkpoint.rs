//! Checkpoints: a directory of PSMT tensors plus `index.txt` mapping
//! parameter names to files, with a header line carrying the net kind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_psmt_file, write_psmt_file, Scalar, TensorData};

const HEADER_PREFIX: &str = "psm-checkpoint v1 kind=";

pub fn save_checkpoint<S: Scalar>(
    dir: impl AsRef<Path>,
    kind: &str,
    entries: &[(String, TensorData<S>)],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut index = format!("{HEADER_PREFIX}{kind}\n");
    for (i, (name, tensor)) in entries.iter().enumerate() {
        let file = format!("p{i:04}.psmt");
        write_psmt_file(dir.join(&file), tensor)?;
        index.push_str(&format!("{name} = {file}\n"));
    }
    fs::write(dir.join("index.txt"), index)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(String, Vec<(String, TensorData<S>)>)> {
    let dir = dir.as_ref();
    let index = fs::read_to_string(dir.join("index.txt"))?;
    let mut lines = index.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("checkpoint", "empty index.txt"))?;
    let kind = header
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| Error::format("checkpoint", format!("bad header `{header}`")))?
        .to_string();
    let mut entries = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, file) = line
            .split_once(" = ")
            .ok_or_else(|| Error::format("checkpoint", format!("bad index line `{line}`")))?;
        let tensor = read_psmt_file(dir.join(file))?;
        entries.push((name.to_string(), tensor));
    }
    Ok((kind, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            (
                "a.w".to_string(),
                TensorData::new(vec![2, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap(),
            ),
            (
                "b.running_mean".to_string(),
                TensorData::new(vec![3], vec![0.1f32, 0.2, 0.3]).unwrap(),
            ),
        ];
        save_checkpoint(dir.path(), "activation", &entries).unwrap();
        let (kind, back) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(kind, "activation");
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }
}
