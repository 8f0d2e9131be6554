use crate::error::{Error, Result};
use crate::tensor::{mode_strides, unfold_position, DenseTensor};

/// Observed unfolding columns of one mode, grouped by row (CSR layout).
///
/// Row `i` lists, in ascending order, the columns `j` of the mode-`d`
/// unfolding whose entry is observed. Iterating rows then columns reproduces
/// the row order of the selection matrix `O_d'` built from `vec(O_(d)ᵀ)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeIndex {
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl ModeIndex {
    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// The binary indicator 𝒪 with the index views used by the solvers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    shape: Vec<usize>,
    indicator: Vec<bool>,
    observed: Vec<usize>,
    per_mode: Vec<ModeIndex>,
}

impl ObservationMask {
    pub fn from_bools(shape: &[usize], indicator: Vec<bool>) -> Result<Self> {
        let probe = DenseTensor::zeros(shape)?;
        if probe.len() != indicator.len() {
            return Err(Error::dims(format!(
                "mask of length {} does not match shape {shape:?}",
                indicator.len()
            )));
        }
        let observed: Vec<usize> = indicator
            .iter()
            .enumerate()
            .filter_map(|(n, &o)| o.then_some(n))
            .collect();
        let per_mode = (0..shape.len())
            .map(|d| build_mode_index(shape, d, &observed))
            .collect();
        Ok(Self {
            shape: shape.to_vec(),
            indicator,
            observed,
            per_mode,
        })
    }

    /// Entries equal to 1.0 are observed; anything other than 0.0 or 1.0 is rejected.
    pub fn from_indicator(t: &DenseTensor) -> Result<Self> {
        let bools = t
            .data()
            .iter()
            .map(|&v| {
                if v == 1.0 || v == 0.0 {
                    Ok(v == 1.0)
                } else {
                    Err(Error::invalid(format!("indicator value {v} is not 0 or 1")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bools(t.shape(), bools)
    }

    pub fn from_linear(shape: &[usize], observed: &[usize]) -> Result<Self> {
        let n: usize = DenseTensor::zeros(shape)?.len();
        let mut bools = vec![false; n];
        for &k in observed {
            *bools
                .get_mut(k)
                .ok_or_else(|| Error::invalid(format!("observed index {k} outside 0..{n}")))? = true;
        }
        Self::from_bools(shape, bools)
    }

    pub fn full(shape: &[usize]) -> Result<Self> {
        let n = DenseTensor::zeros(shape)?.len();
        Self::from_bools(shape, vec![true; n])
    }

    /// Entries of `t` that are finite count as observed.
    pub fn from_finite(t: &DenseTensor) -> Result<Self> {
        Self::from_bools(t.shape(), t.data().iter().map(|v| v.is_finite()).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.indicator.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicator.is_empty()
    }

    /// |Ω|
    pub fn observed_count(&self) -> usize {
        self.observed.len()
    }

    /// |Ω^c|
    pub fn missing_count(&self) -> usize {
        self.len() - self.observed.len()
    }

    pub fn sampling_rate(&self) -> f64 {
        self.observed_count() as f64 / self.len() as f64
    }

    pub fn is_observed(&self, n: usize) -> bool {
        self.indicator[n]
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.indicator
    }

    /// Observed linear offsets in `vec` order; the rows of `O_1`.
    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        self.indicator
            .iter()
            .enumerate()
            .filter_map(|(n, &o)| (!o).then_some(n))
            .collect()
    }

    pub fn mode_index(&self, d: usize) -> &ModeIndex {
        &self.per_mode[d]
    }

    pub fn indicator(&self) -> DenseTensor {
        let data = self.indicator.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        DenseTensor::new(self.shape.clone(), data).expect("mask shape is valid")
    }

    /// `O_1 x`: the observed entries of a length-N vector.
    pub fn slice(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.len());
        self.observed.iter().map(|&n| x[n]).collect()
    }

    /// `O_1ᵀ z`: scatter an |Ω| vector into a zero length-N vector.
    pub fn zero_pad(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.observed.len());
        let mut out = vec![0.0; self.len()];
        for (&n, &v) in self.observed.iter().zip(z) {
            out[n] = v;
        }
        out
    }

    pub fn check_shape(&self, t: &DenseTensor) -> Result<()> {
        if t.shape() != self.shape.as_slice() {
            return Err(Error::dims(format!(
                "mask shape {:?} does not match tensor shape {:?}",
                self.shape,
                t.shape()
            )));
        }
        Ok(())
    }
}

/// Linear offset of unfolding entry `(row, col)` of mode `d`.
#[inline]
pub(crate) fn linear_from_unfold(row: usize, col: usize, left: usize, extent: usize) -> usize {
    col % left + left * row + left * extent * (col / left)
}

fn build_mode_index(shape: &[usize], d: usize, observed: &[usize]) -> ModeIndex {
    let extent = shape[d];
    let (left, _) = mode_strides(shape, d);
    let mut counts = vec![0usize; extent + 1];
    let positions: Vec<(usize, usize)> = observed.iter().map(|&n| unfold_position(n, left, extent)).collect();
    for &(row, _) in &positions {
        counts[row + 1] += 1;
    }
    for i in 0..extent {
        counts[i + 1] += counts[i];
    }
    let mut fill = counts.clone();
    let mut cols = vec![0usize; observed.len()];
    // `observed` is ascending in n, and col is monotone in n within a row.
    for (row, col) in positions {
        cols[fill[row]] = col;
        fill[row] += 1;
    }
    ModeIndex { offsets: counts, cols }
}
