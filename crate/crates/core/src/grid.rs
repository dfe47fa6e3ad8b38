//! Flat row-major 2-D grids for label maps, instance masks, and score maps.

use crate::error::{Error, Result};

pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::shape_mismatch(
                "grid",
                format!("{h}x{w} = {} elements", h * w),
                format!("{}", data.len()),
            ));
        }
        Ok(Grid { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.w + c] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_size<U>(&self, other: &Grid<U>) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// 4-connected components over pixels where `fg` holds. Instance ids are
/// consecutive from 1 in row-major discovery order.
pub fn label_components(
    h: usize,
    w: usize,
    fg: impl Fn(usize) -> bool,
) -> Result<(InstanceMask, usize)> {
    let mut out = Grid::filled(h, w, 0u16);
    let mut next = 0u16;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if out.data()[start] != 0 || !fg(start) {
            continue;
        }
        next = next.checked_add(1).ok_or_else(|| {
            Error::InvalidArgument("more than 65535 connected components".to_string())
        })?;
        out.data_mut()[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize, out: &mut InstanceMask| {
                if out.data()[j] == 0 && fg(j) {
                    out.data_mut()[j] = next;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w, &mut out);
            }
            if r + 1 < h {
                visit(i + w, &mut out);
            }
            if c > 0 {
                visit(i - 1, &mut out);
            }
            if c + 1 < w {
                visit(i + 1, &mut out);
            }
        }
    }
    Ok((out, next as usize))
}

/// Pixel label maps: 0 = background, 1..=C = classes, 255 = ignore.
pub type LabelMap = Grid<u8>;
/// Instance masks: 0 = background, consecutive ids from 1.
pub type InstanceMask = Grid<u16>;
/// Scalar maps (PSMs, score maps) in natural row-major layout.
pub type ScalarMap = Grid<f32>;

/// A detected or ground-truth point. `class` follows the label convention
/// (1 = positive, 2 = negative for two-class detection).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub row: f64,
    pub col: f64,
    pub class: u8,
    pub score: f32,
}

impl Point {
    pub fn dist(&self, other: &Point) -> f64 {
        let dr = self.row - other.row;
        let dc = self.col - other.col;
        (dr * dr + dc * dc).sqrt()
    }
}
