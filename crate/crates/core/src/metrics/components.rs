use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Voxel adjacency used for lesion labeling. `Four` and `Eight` are in-plane
/// only, so on a stacked volume they label every slice independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Connectivity {
    Four,
    Eight,
    Six,
    TwentySix,
}

impl Connectivity {
    pub fn value(self) -> u32 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }

    /// Neighbour offsets `(dz, dy, dx)`, excluding the origin.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let nonzero = [dz, dy, dx].iter().filter(|&&d| d != 0).count();
                    let keep = match self {
                        Connectivity::Four => dz == 0 && nonzero == 1,
                        Connectivity::Eight => dz == 0 && nonzero >= 1,
                        Connectivity::Six => nonzero == 1,
                        Connectivity::TwentySix => nonzero >= 1,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 4, 8, 6 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u32 {
    fn from(c: Connectivity) -> u32 {
        c.value()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// Connected components of a mask. Components are ordered by their smallest
/// voxel index and each lists its voxel indices in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LesionSet {
    pub dims: [usize; 3],
    pub connectivity: Connectivity,
    /// 0 for background, `k + 1` for voxels of component `k`.
    pub labels: Vec<u32>,
    pub components: Vec<Vec<usize>>,
}

impl LesionSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> LesionSet {
    let dims = mask.dims();
    let [d, h, w] = dims;
    let data = mask.data();
    // Only neighbours that precede the voxel in raster order.
    let back: Vec<[isize; 3]> = connectivity.offsets().into_iter().filter(|o| (o[0], o[1], o[2]) < (0, 0, 0)).collect();
    let mut parent: Vec<usize> = (0..data.len()).collect();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if data[i] == 0 {
                    continue;
                }
                for o in &back {
                    let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = (nz as usize * h + ny as usize) * w + nx as usize;
                    if data[j] == 0 {
                        continue;
                    }
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; data.len()];
    let mut root_label = std::collections::HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..data.len() {
        if data[i] == 0 {
            continue;
        }
        let r = find(&mut parent, i);
        let k = *root_label.entry(r).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[k].push(i);
        labels[i] = k as u32 + 1;
    }
    LesionSet { dims, connectivity, labels, components }
}
