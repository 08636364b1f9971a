//! Uncompressed COCO run-length encoding.
//!
//! Counts run over the mask in column-major order and always start with a
//! run of zeros (possibly of length 0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Mask, BINARIZE_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`, as in COCO.
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(m: &Mask) -> Rle {
        let (h, w) = m.resolution();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let on = m.get(y, x) >= BINARIZE_THRESHOLD;
                if on != current {
                    counts.push(run);
                    run = 0;
                    current = on;
                }
                run += 1;
            }
        }
        counts.push(run);
        Rle { size: [h, w], counts }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != (h * w) as u64 {
            return Err(Error::Shape(format!("RLE counts sum to {total}, expected {}", h * w)));
        }
        let mut data = vec![0.0; h * w];
        let mut pos = 0usize;
        let mut on = false;
        for &c in &self.counts {
            if on {
                for p in pos..pos + c as usize {
                    let (x, y) = (p / h, p % h);
                    data[y * w + x] = 1.0;
                }
            }
            pos += c as usize;
            on = !on;
        }
        Mask::new(h, w, data)
    }
}
