//! Ground-truth segments as 4-connected components of a PV mask.

use std::collections::VecDeque;

use crate::datamodel::MaskPatch;

/// Disjoint binary masks, one per component, ordered by the raster
/// position of each component's first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSegments {
    pub width: usize,
    pub height: usize,
    pub segments: Vec<Vec<u8>>,
}

impl GroundTruthSegments {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

pub fn connected_components(mask: &MaskPatch) -> GroundTruthSegments {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut segments = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = segments.len();
        let mut seg = vec![0u8; w * h];
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            seg[i] = 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] != 0 && label[j] == usize::MAX {
                    label[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        segments.push(seg);
    }
    GroundTruthSegments {
        width: w,
        height: h,
        segments,
    }
}
