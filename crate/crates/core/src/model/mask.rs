use crate::error::{Error, Result};

/// Which keys each query row may attend to. Columns cover the cached prefix
/// followed by the rows of the current forward, so query row `r` sits at
/// column `prefix + r`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Nothing permitted; fill with [`AttnMask::allow`].
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    /// Plain causal mask for `rows` new tokens after `prefix` cached ones.
    pub fn causal(rows: usize, prefix: usize) -> Self {
        let mut m = Self::empty(rows, prefix + rows);
        for r in 0..rows {
            for c in 0..=prefix + r {
                m.allow(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of cached columns this mask assumes.
    pub fn prefix_len(&self) -> usize {
        self.cols - self.rows
    }

    pub fn allow(&mut self, row: usize, col: usize) {
        self.allowed[row * self.cols + col] = true;
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.cols..(row + 1) * self.cols]
    }

    /// Permitted column indices of one row.
    pub fn permitted(&self, row: usize) -> Vec<usize> {
        self.row(row).iter().enumerate().filter_map(|(c, &a)| a.then_some(c)).collect()
    }

    /// The leading `rows` query rows over the leading `prefix + rows` columns.
    pub fn leading(&self, rows: usize) -> Self {
        let prefix = self.prefix_len();
        let cols = prefix + rows;
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            allowed.extend_from_slice(&self.row(r)[..cols]);
        }
        Self { rows, cols, allowed }
    }

    /// Every row must permit its own column.
    pub fn validate(&self) -> Result<()> {
        if self.cols < self.rows {
            return Err(Error::shape(
                "AttnMask",
                format!("{} rows but only {} columns", self.rows, self.cols),
            ));
        }
        let prefix = self.prefix_len();
        for r in 0..self.rows {
            if !self.allows(r, prefix + r) {
                return Err(Error::Invalid(format!("mask row {r} does not permit itself")));
            }
        }
        Ok(())
    }
}
