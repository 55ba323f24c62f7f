use crate::error::{Error, Result};

/// Binary `D x H x W` mask stored as 0/1 bytes. 2D masks use `D = 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![0; dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("mask {dims:?} needs {} values, got {}", dims.iter().product::<usize>(), data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(dims);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    if f(z, y, x) {
                        m.set(z, y, x, true);
                    }
                }
            }
        }
        m
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// Plane `z` as a `1 x H x W` mask.
    pub fn plane(&self, z: usize) -> Mask {
        let n = self.dims[1] * self.dims[2];
        Mask { dims: [1, self.dims[1], self.dims[2]], data: self.data[z * n..(z + 1) * n].to_vec() }
    }

    /// Stacks masks along the first axis.
    pub fn stack(planes: &[Mask]) -> Result<Mask> {
        let first = planes.first().ok_or_else(|| Error::Shape("cannot stack zero masks".into()))?;
        let [_, h, w] = first.dims;
        let mut data = Vec::new();
        let mut depth = 0;
        for p in planes {
            if p.dims[1..] != [h, w] {
                return Err(Error::Shape(format!("cannot stack mask {:?} onto {:?}", p.dims, first.dims)));
            }
            depth += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Mask { dims: [depth, h, w], data })
    }
}
