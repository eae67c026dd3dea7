//! Gather-index tables for spatial rearrangements of channels-last maps.
//!
//! Every table maps output element `k` (flat, row-major) to a flat source
//! element or [`GATHER_ZERO`]. Tables depend only on shapes, so they are
//! built once and shared.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use dyndistill_autodiff::GATHER_ZERO;

use crate::config::{AxialShiftConfig, ShiftDirection};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub(crate) enum Key {
    Shift {
        h: usize,
        w: usize,
        cfg: AxialShiftConfig,
        horizontal: bool,
    },
    PatchMerge {
        h: usize,
        w: usize,
        c: usize,
        n: usize,
    },
    Upsample {
        h: usize,
        w: usize,
        c: usize,
        f: usize,
    },
    Im2col3 {
        h: usize,
        w: usize,
        c: usize,
    },
    Permute {
        name: &'static str,
        dims: [usize; 4],
    },
}

pub(crate) fn cached(key: Key, build: impl FnOnce() -> Vec<u32>) -> Arc<[u32]> {
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<[u32]>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("index cache poisoned").get(&key) {
        return Arc::clone(hit);
    }
    let table: Arc<[u32]> = Arc::from(build());
    cache
        .lock()
        .expect("index cache poisoned")
        .entry(key)
        .or_insert(table)
        .clone()
}

fn flat(row: usize, col: usize, cols: usize) -> u32 {
    u32::try_from(row * cols + col).expect("feature map too large for u32 gather indices")
}

/// Channel `c` moved by `cfg.offset(c)` cells along one axis; vacated cells
/// are zero: `out[i, j, c] = x[i, j + off(c), c]` (horizontal) or
/// `x[i + off(c), j, c]` (vertical).
pub fn axial_shift(h: usize, w: usize, cfg: AxialShiftConfig, dir: ShiftDirection) -> Arc<[u32]> {
    let horizontal = dir == ShiftDirection::Horizontal;
    cached(
        Key::Shift {
            h,
            w,
            cfg,
            horizontal,
        },
        || {
            let c = cfg.channels;
            let mut out = Vec::with_capacity(h * w * c);
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let off = cfg.offset(ch);
                        let (si, sj) = if horizontal {
                            (i as isize, j as isize + off)
                        } else {
                            (i as isize + off, j as isize)
                        };
                        if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                            out.push(GATHER_ZERO);
                        } else {
                            out.push(flat(si as usize * w + sj as usize, ch, c));
                        }
                    }
                }
            }
            out
        },
    )
}

/// Space-to-depth: each `n x n` block becomes one row of `n*n*c` values
/// ordered `(di, dj, channel)`.
pub fn patch_merge(h: usize, w: usize, c: usize, n: usize) -> Arc<[u32]> {
    cached(Key::PatchMerge { h, w, c, n }, || {
        let (ho, wo) = (h / n, w / n);
        let mut out = Vec::with_capacity(h * w * c);
        for i in 0..ho {
            for j in 0..wo {
                for di in 0..n {
                    for dj in 0..n {
                        for ch in 0..c {
                            out.push(flat((i * n + di) * w + j * n + dj, ch, c));
                        }
                    }
                }
            }
        }
        out
    })
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(h: usize, w: usize, c: usize, f: usize) -> Arc<[u32]> {
    cached(Key::Upsample { h, w, c, f }, || {
        let mut out = Vec::with_capacity(h * w * c * f * f);
        for i in 0..h * f {
            for j in 0..w * f {
                for ch in 0..c {
                    out.push(flat((i / f) * w + j / f, ch, c));
                }
            }
        }
        out
    })
}

/// 3x3 zero-padded patches: row `(i, j)` holds `9*c` values ordered
/// `(di, dj, channel)` for offsets `-1..=1`.
pub fn im2col3x3(h: usize, w: usize, c: usize) -> Arc<[u32]> {
    cached(Key::Im2col3 { h, w, c }, || {
        let mut out = Vec::with_capacity(h * w * 9 * c);
        for i in 0..h as isize {
            for j in 0..w as isize {
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (si, sj) = (i + di, j + dj);
                        let inside = si >= 0 && sj >= 0 && si < h as isize && sj < w as isize;
                        for ch in 0..c {
                            out.push(if inside {
                                flat(si as usize * w + sj as usize, ch, c)
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
        out
    })
}
