use crate::numerics::{Scalar, Tensor};
use crate::{Error, Result};

/// Sparse form of the binary correspondence matrix `C` and row visibility
/// `m`: `matches[i] = Some(j)` means target token `i` came from source
/// token `j` (so `C[i, j] = 1`, `m[i] = 1`); `None` is an all-zero row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Correspondence {
    pub height: usize,
    pub width: usize,
    matches: Vec<Option<usize>>,
}

impl Correspondence {
    pub fn new(height: usize, width: usize, matches: Vec<Option<usize>>) -> Result<Self> {
        let n = height * width;
        if matches.len() != n {
            return Err(Error::Shape(format!("{} rows for a {height}x{width} token grid", matches.len())));
        }
        if let Some((i, j)) = matches.iter().enumerate().find_map(|(i, m)| m.filter(|&j| j >= n).map(|j| (i, j))) {
            return Err(Error::OutOfBounds(format!("row {i} points at source token {j} of {n}")));
        }
        Ok(Self { height, width, matches })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self { height, width, matches: (0..height * width).map(Some).collect() }
    }

    /// Builds from a dense `C` and `m`, enforcing both invariants.
    pub fn from_dense<T: Scalar>(height: usize, width: usize, c: &Tensor<T>, m: &[T]) -> Result<Self> {
        let n = height * width;
        if c.shape() != [n, n] || m.len() != n {
            return Err(Error::Shape(format!("C {:?} and m [{}] for {n} tokens", c.shape(), m.len())));
        }
        let mut matches = Vec::with_capacity(n);
        for (i, row) in c.data().chunks(n).enumerate() {
            let mut hit = None;
            for (j, &v) in row.iter().enumerate() {
                let v = v.f64();
                if v == 1.0 {
                    if hit.is_some() {
                        return Err(Error::Rejected(format!("row {i} of C has more than one match")));
                    }
                    hit = Some(j);
                } else if v != 0.0 {
                    return Err(Error::Rejected(format!("C[{i}, {j}] = {v} is not binary")));
                }
            }
            match (m[i].f64(), hit) {
                (1.0, Some(_)) | (0.0, None) => matches.push(hit),
                (0.0, Some(_)) => return Err(Error::Rejected(format!("row {i} is hidden but C has a match"))),
                (1.0, None) => return Err(Error::Rejected(format!("row {i} is visible but C has no match"))),
                (v, _) => return Err(Error::Rejected(format!("m[{i}] = {v} is not binary"))),
            }
        }
        Ok(Self { height, width, matches })
    }

    pub fn tokens(&self) -> usize {
        self.matches.len()
    }

    pub fn matches(&self) -> &[Option<usize>] {
        &self.matches
    }

    pub fn visible_count(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn mask<T: Scalar>(&self) -> Vec<T> {
        self.matches.iter().map(|m| if m.is_some() { T::one() } else { T::zero() }).collect()
    }

    pub fn dense<T: Scalar>(&self) -> Tensor<T> {
        let n = self.tokens();
        let mut c = Tensor::zeros(&[n, n]);
        for (i, m) in self.matches.iter().enumerate() {
            if let Some(j) = m {
                c.data_mut()[i * n + j] = T::one();
            }
        }
        c
    }
}
