use alloc::vec::Vec;

/// Boundary voxels of a mask, as linear indices into the grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Surface {
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Surface {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn coords(&self, i: usize) -> Vec<usize> {
        unravel(self.indices[i], &self.shape)
    }
}

pub(crate) fn unravel(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .map(|&n| {
            let c = idx % n;
            idx /= n;
            c
        })
        .collect()
}

/// Foreground voxels with at least one face neighbour in the background;
/// positions outside the grid count as background.
pub fn surface_extract(mask: &[bool], shape: &[usize]) -> Surface {
    debug_assert_eq!(mask.len(), shape.iter().product::<usize>());
    let mut strides = Vec::with_capacity(shape.len());
    let mut s = 1;
    for &n in shape {
        strides.push(s);
        s *= n;
    }
    let mut indices = Vec::new();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let c = unravel(i, shape);
        let boundary = (0..shape.len()).any(|a| {
            c[a] == 0 || c[a] + 1 == shape[a] || !mask[i - strides[a]] || !mask[i + strides[a]]
        });
        if boundary {
            indices.push(i);
        }
    }
    Surface {
        shape: shape.to_vec(),
        indices,
    }
}
