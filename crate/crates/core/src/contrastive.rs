//! Cross-modal similarities, temperature-scaled retrieval distributions and
//! the symmetric InfoNCE objective.
//!
//! Every function here is pure and works on plain `f64` buffers. The
//! differentiable counterpart used during training is [`Tape::info_nce`],
//! which shares the softmax routines below.
//!
//! [`Tape::info_nce`]: crate::tensor::Tape::info_nce

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Imu,
    Video,
    Text,
}

/// Which axis of a similarity matrix a softmax runs over.
///
/// `RowToCol` normalizes each row (e.g. IMU → video), `ColToRow` each column
/// (video → IMU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowToCol,
    ColToRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub row_modality: Modality,
    pub col_modality: Modality,
}

impl SimilarityMatrix {
    pub fn from_values(values: Tensor, row_modality: Modality, col_modality: Modality) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid("similarity_matrix", "values must be 2-D"));
        }
        Ok(SimilarityMatrix {
            values,
            row_modality,
            col_modality,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values.data()[r * self.cols() + c]
    }

    pub fn transposed(&self) -> SimilarityMatrix {
        let (m, n) = (self.rows(), self.cols());
        let d = self.values.data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = d[r * n + c];
            }
        }
        SimilarityMatrix {
            values: Tensor::new(vec![n, m], out).expect("transposed shape"),
            row_modality: self.col_modality,
            col_modality: self.row_modality,
        }
    }

    fn square(&self, op: &'static str) -> Result<usize> {
        if self.rows() != self.cols() {
            return Err(Error::invalid(
                op,
                format!("expected a square matrix, got {}x{}", self.rows(), self.cols()),
            ));
        }
        Ok(self.rows())
    }
}

const UNIT_TOLERANCE: f64 = 1e-4;

fn check_unit(op: &'static str, v: &[f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(op, format!("vector norm {norm} is not unit")));
    }
    Ok(())
}

/// Inner products between every row embedding and every column embedding.
pub fn similarity_matrix(
    rows: &[Vec<f64>],
    cols: &[Vec<f64>],
    row_modality: Modality,
    col_modality: Modality,
) -> Result<SimilarityMatrix> {
    let dim = rows
        .first()
        .or(cols.first())
        .map_or(0, Vec::len);
    for v in rows.iter().chain(cols) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.len(),
                context: "similarity_matrix".into(),
            });
        }
        check_unit("similarity_matrix", v)?;
    }
    let mut values = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols {
            values.push(dot(r, c));
        }
    }
    SimilarityMatrix::from_values(
        Tensor::new(vec![rows.len(), cols.len()], values)?,
        row_modality,
        col_modality,
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(
            "temperature",
            format!("must be positive and finite, got {temperature}"),
        ));
    }
    Ok(())
}

/// Softmax of `values / temperature` along the requested axis, laid out in
/// the same `rows × cols` index space as the input.
pub(crate) fn softmax_matrix(
    values: &[f64],
    rows: usize,
    cols: usize,
    temperature: f64,
    direction: Direction,
) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    let mut out = vec![0.0; rows * cols];
    match direction {
        Direction::RowToCol => {
            for r in 0..rows {
                let idx: Vec<usize> = (0..cols).map(|c| r * cols + c).collect();
                softmax_into(values, &idx, temperature, &mut out);
            }
        }
        Direction::ColToRow => {
            for c in 0..cols {
                let idx: Vec<usize> = (0..rows).map(|r| r * cols + c).collect();
                softmax_into(values, &idx, temperature, &mut out);
            }
        }
    }
    Ok(out)
}

fn softmax_into(values: &[f64], idx: &[usize], temperature: f64, out: &mut [f64]) {
    let max = idx
        .iter()
        .map(|&k| values[k] / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &k in idx {
        let e = (values[k] / temperature - max).exp();
        out[k] = e;
        total += e;
    }
    for &k in idx {
        out[k] /= total;
    }
}

/// `log P[i][i]` for each diagonal entry of a square matrix, via log-sum-exp.
pub(crate) fn log_diagonal(values: &[f64], b: usize, temperature: f64, direction: Direction) -> Vec<f64> {
    (0..b)
        .map(|i| {
            let line: Vec<f64> = (0..b)
                .map(|k| match direction {
                    Direction::RowToCol => values[i * b + k],
                    Direction::ColToRow => values[k * b + i],
                } / temperature)
                .collect();
            let max = line.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + line.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            values[i * b + i] / temperature - lse
        })
        .collect()
}

/// Row-stochastic retrieval probabilities. For `ColToRow`, row `j` of the
/// result is the distribution over rows for column `j`.
pub fn retrieval_distribution(
    sims: &SimilarityMatrix,
    temperature: f64,
    direction: Direction,
) -> Result<Tensor> {
    let (m, n) = (sims.rows(), sims.cols());
    let probs = softmax_matrix(sims.values.data(), m, n, temperature, direction)?;
    match direction {
        Direction::RowToCol => Tensor::new(vec![m, n], probs),
        Direction::ColToRow => {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = probs[r * n + c];
                }
            }
            Tensor::new(vec![n, m], out)
        }
    }
}

/// `−(1/B) Σᵢ log P[i][i]`, the diagonal being the positive pairing.
pub fn info_nce(sims: &SimilarityMatrix, temperature: f64, direction: Direction) -> Result<f64> {
    let b = sims.square("info_nce")?;
    check_temperature(temperature)?;
    if b == 0 {
        return Err(Error::invalid("info_nce", "empty batch"));
    }
    let logs = log_diagonal(sims.values.data(), b, temperature, direction);
    Ok(-logs.iter().sum::<f64>() / b as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetricLoss {
    /// Row-softmax loss (e.g. IMU → video).
    pub forward: f64,
    /// Column-softmax loss (e.g. video → IMU).
    pub backward: f64,
    pub symmetric: f64,
}

pub fn symmetric_loss(sims: &SimilarityMatrix, temperature: f64) -> Result<SymmetricLoss> {
    let forward = info_nce(sims, temperature, Direction::RowToCol)?;
    let backward = info_nce(sims, temperature, Direction::ColToRow)?;
    Ok(SymmetricLoss {
        forward,
        backward,
        symmetric: (forward + backward) / 2.0,
    })
}

/// Per-batch (or per-epoch mean) loss terms. Fields are present only for the
/// modalities a training mode aligns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_i2v: Option<f64>,
    pub l_v2i: Option<f64>,
    pub l_sym_iv: Option<f64>,
    pub l_i2t: Option<f64>,
    pub l_t2i: Option<f64>,
    pub l_sym_it: Option<f64>,
    pub l_total: Option<f64>,
}

impl LossReport {
    pub fn from_video(iv: SymmetricLoss) -> Self {
        LossReport {
            l_i2v: Some(iv.forward),
            l_v2i: Some(iv.backward),
            l_sym_iv: Some(iv.symmetric),
            l_total: Some(iv.symmetric),
            ..Default::default()
        }
    }

    pub fn from_text(it: SymmetricLoss) -> Self {
        LossReport {
            l_i2t: Some(it.forward),
            l_t2i: Some(it.backward),
            l_sym_it: Some(it.symmetric),
            l_total: Some(it.symmetric),
            ..Default::default()
        }
    }

    pub fn fields(&self) -> [Option<f64>; 7] {
        [
            self.l_i2v,
            self.l_v2i,
            self.l_sym_iv,
            self.l_i2t,
            self.l_t2i,
            self.l_sym_it,
            self.l_total,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Option<f64>; 7] {
        [
            &mut self.l_i2v,
            &mut self.l_v2i,
            &mut self.l_sym_iv,
            &mut self.l_i2t,
            &mut self.l_t2i,
            &mut self.l_sym_it,
            &mut self.l_total,
        ]
    }

    /// Field-wise mean over reports; a field is present if any report has it.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let mut out = LossReport::default();
        for (k, slot) in out.fields_mut().into_iter().enumerate() {
            let present: Vec<f64> = reports.iter().filter_map(|r| r.fields()[k]).collect();
            if !present.is_empty() {
                *slot = Some(present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        out
    }
}

/// `L_{i↔v↔t} = L_{i↔v} + L_{i↔t}` with every component reported.
pub fn trimodal_loss(
    sims_iv: &SimilarityMatrix,
    sims_it: &SimilarityMatrix,
    temperature: f64,
) -> Result<LossReport> {
    let b_iv = sims_iv.square("trimodal_loss")?;
    let b_it = sims_it.square("trimodal_loss")?;
    if b_iv != b_it {
        return Err(Error::invalid(
            "trimodal_loss",
            format!("batch sizes differ: {b_iv} vs {b_it}"),
        ));
    }
    let iv = symmetric_loss(sims_iv, temperature)?;
    let it = symmetric_loss(sims_it, temperature)?;
    Ok(LossReport {
        l_i2v: Some(iv.forward),
        l_v2i: Some(iv.backward),
        l_sym_iv: Some(iv.symmetric),
        l_i2t: Some(it.forward),
        l_t2i: Some(it.backward),
        l_sym_it: Some(it.symmetric),
        l_total: Some(iv.symmetric + it.symmetric),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sims(rows: &[Vec<f64>]) -> SimilarityMatrix {
        SimilarityMatrix::from_values(Tensor::from_rows(rows).unwrap(), Modality::Imu, Modality::Video)
            .unwrap()
    }

    fn identity(b: usize) -> SimilarityMatrix {
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|i| (0..b).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        sims(&rows)
    }

    // log(1 + e^-1): P = e/(e+1) on the diagonal.
    const IDENTITY_B2_LOSS: f64 = 0.313_261_687_518_222_8;

    #[test]
    fn similarity_of_orthonormal_vectors_is_identity() {
        let basis = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let s = similarity_matrix(&basis, &basis, Modality::Imu, Modality::Video).unwrap();
        assert_eq!(s.values.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn similarity_hand_inner_product() {
        let s = similarity_matrix(&[vec![1.0, 0.0]], &[vec![0.6, 0.8]], Modality::Imu, Modality::Text)
            .unwrap();
        assert!((s.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn similarity_rejects_mixed_dimensions() {
        let err = similarity_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 0.0]], Modality::Imu, Modality::Video);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn uniform_sims_give_uniform_distribution() {
        let s = sims(&[vec![0.3; 4], vec![0.3; 4], vec![0.3; 4], vec![0.3; 4]]);
        let p = retrieval_distribution(&s, 0.1, Direction::RowToCol).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_softmax_identity() {
        let p = retrieval_distribution(&identity(2), 1.0, Direction::RowToCol).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn small_temperature_concentrates() {
        let p = retrieval_distribution(&identity(2), 0.01, Direction::RowToCol).unwrap();
        assert!(p.data()[0] > 1.0 - 1e-10);
        assert!(p.data()[3] > 1.0 - 1e-10);
    }

    #[test]
    fn column_direction_is_transpose_of_row_direction_on_transpose() {
        let s = sims(&[vec![0.1, 0.5, -0.2], vec![0.9, 0.0, 0.3], vec![-0.4, 0.2, 0.7]]);
        let col = retrieval_distribution(&s, 0.5, Direction::ColToRow).unwrap();
        let row_t = retrieval_distribution(&s.transposed(), 0.5, Direction::RowToCol).unwrap();
        assert_eq!(col, row_t);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        assert!(retrieval_distribution(&identity(2), 0.0, Direction::RowToCol).is_err());
        assert!(info_nce(&identity(2), -1.0, Direction::RowToCol).is_err());
    }

    #[test]
    fn info_nce_identity_b2() {
        let l = info_nce(&identity(2), 1.0, Direction::RowToCol).unwrap();
        assert!((l - IDENTITY_B2_LOSS).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn info_nce_uniform_is_log_b() {
        for b in [2usize, 5, 16] {
            let s = sims(&vec![vec![0.2; b]; b]);
            let l = info_nce(&s, 0.1, Direction::RowToCol).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn info_nce_single_candidate_is_zero() {
        let l = info_nce(&sims(&[vec![0.4]]), 0.1, Direction::ColToRow).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn info_nce_rejects_rectangular() {
        let s = sims(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert!(info_nce(&s, 0.1, Direction::RowToCol).is_err());
    }

    #[test]
    fn symmetric_loss_on_symmetric_matrix() {
        let s = sims(&[vec![0.9, 0.1, -0.3], vec![0.1, 0.5, 0.2], vec![-0.3, 0.2, 0.8]]);
        let l = symmetric_loss(&s, 0.1).unwrap();
        assert_eq!(l.forward, l.backward);
        let id = symmetric_loss(&identity(2), 1.0).unwrap();
        assert!((id.symmetric - IDENTITY_B2_LOSS).abs() < 1e-12);
    }

    #[test]
    fn transpose_swaps_directions() {
        let s = sims(&[vec![0.9, 0.4, -0.3], vec![0.1, 0.5, 0.2], vec![0.6, 0.2, 0.8]]);
        let a = symmetric_loss(&s, 0.2).unwrap();
        let b = symmetric_loss(&s.transposed(), 0.2).unwrap();
        assert!((a.forward - b.backward).abs() < 1e-14);
        assert!((a.backward - b.forward).abs() < 1e-14);
        assert!((a.symmetric - b.symmetric).abs() < 1e-14);
    }

    #[test]
    fn trimodal_hand_values() {
        let r = trimodal_loss(&identity(2), &identity(2), 1.0).unwrap();
        assert!((r.l_total.unwrap() - 2.0 * IDENTITY_B2_LOSS).abs() < 1e-12);
        assert!((r.l_total.unwrap() - 0.62652).abs() < 1e-5);

        let flat = sims(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let r = trimodal_loss(&identity(2), &flat, 1.0).unwrap();
        assert!((r.l_total.unwrap() - (IDENTITY_B2_LOSS + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn trimodal_rejects_mismatched_batches() {
        assert!(trimodal_loss(&identity(2), &identity(3), 1.0).is_err());
    }

    #[test]
    fn report_mean_keeps_present_fields() {
        let a = LossReport::from_video(SymmetricLoss { forward: 1.0, backward: 3.0, symmetric: 2.0 });
        let b = LossReport::from_video(SymmetricLoss { forward: 3.0, backward: 1.0, symmetric: 2.0 });
        let m = LossReport::mean(&[a, b]);
        assert_eq!(m.l_i2v, Some(2.0));
        assert_eq!(m.l_i2t, None);
    }

    fn square_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..8).prop_flat_map(|b| prop::collection::vec(prop::collection::vec(-1.0f64..1.0, b), b))
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(m in square_matrix(), t in prop::sample::select(vec![0.05, 0.1, 1.0, 10.0])) {
            let s = sims(&m);
            for dir in [Direction::RowToCol, Direction::ColToRow] {
                let p = retrieval_distribution(&s, t, dir).unwrap();
                let n = p.shape()[1];
                for r in 0..p.shape()[0] {
                    let total: f64 = p.data()[r * n..(r + 1) * n].iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn row_shift_leaves_distribution_unchanged(m in square_matrix(), shift in -3.0f64..3.0) {
            let b = m.len();
            let mut shifted = m.clone();
            shifted[0].iter_mut().for_each(|v| *v += shift);
            let p = retrieval_distribution(&sims(&m), 0.1, Direction::RowToCol).unwrap();
            let q = retrieval_distribution(&sims(&shifted), 0.1, Direction::RowToCol).unwrap();
            for c in 0..b {
                prop_assert!((p.data()[c] - q.data()[c]).abs() < 1e-9);
            }
        }

        #[test]
        fn lower_temperature_sharpens_strict_maximum(m in square_matrix()) {
            let row = &m[0];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let count = row.iter().filter(|&&v| v == max).count();
            let gap = row.iter().filter(|&&v| v < max).map(|v| max - v).fold(f64::INFINITY, f64::min);
            prop_assume!(count == 1 && row.len() > 1 && gap > 1e-3);
            let s = sims(&m);
            let mut last = 0.0;
            for t in [10.0, 1.0, 0.5, 0.2, 0.1] {
                let p = retrieval_distribution(&s, t, Direction::RowToCol).unwrap();
                let top = p.data()[..row.len()].iter().copied().fold(0.0, f64::max);
                prop_assert!(top > last);
                last = top;
            }
        }

        #[test]
        fn info_nce_is_nonnegative(m in square_matrix(), t in 0.05f64..5.0) {
            let s = sims(&m);
            prop_assert!(info_nce(&s, t, Direction::RowToCol).unwrap() >= 0.0);
            prop_assert!(info_nce(&s, t, Direction::ColToRow).unwrap() >= 0.0);
        }

        #[test]
        fn total_dominates_components(a in square_matrix(), t in 0.05f64..2.0) {
            let s = sims(&a);
            let r = trimodal_loss(&s, &s.transposed(), t).unwrap();
            let total = r.l_total.unwrap();
            prop_assert!(total >= r.l_sym_iv.unwrap() && total >= r.l_sym_it.unwrap());
        }
    }
}
