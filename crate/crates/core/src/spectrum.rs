//! Eigenvalue spectrum of the continuous transition map `exp(-A)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ssm::{SsmLayerParams, Variant};

/// Descending eigenvalues per layer plus summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub per_layer: Vec<Vec<f64>>,
    pub summary: Vec<LayerSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSummary {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Fraction of eigenvalues above 0.99.
    pub frac_near_one: f64,
    /// Fraction of eigenvalues below 0.01.
    pub frac_near_zero: f64,
}

impl LayerSummary {
    fn of(row: &[f64]) -> Self {
        let n = row.len() as f64;
        Self {
            lambda_max: row.first().copied().unwrap_or(f64::NAN),
            lambda_min: row.last().copied().unwrap_or(f64::NAN),
            frac_near_one: row.iter().filter(|v| **v > 0.99).count() as f64 / n,
            frac_near_zero: row.iter().filter(|v| **v < 0.01).count() as f64 / n,
        }
    }
}

/// `λ_i = exp(-a_i)` sorted descending. Mamba2 layers yield one value per head.
pub fn layer_spectrum(params: &SsmLayerParams) -> Vec<f64> {
    let mut lambda: Vec<f64> = match params.variant {
        Variant::Mamba | Variant::Mamba2 { .. } => params.a_diag.iter().map(|a| (-a).exp()).collect(),
    };
    lambda.sort_by(|a, b| b.total_cmp(a));
    lambda
}

/// Stack per-layer spectra (rows = layers, columns = rank).
pub fn spectrum_heatmap<'a>(layers: impl IntoIterator<Item = &'a SsmLayerParams>) -> Result<SpectrumReport> {
    let per_layer: Vec<Vec<f64>> = layers.into_iter().map(layer_spectrum).collect();
    if per_layer.is_empty() {
        return Err(Error::InvalidArgument("spectrum needs at least one layer".into()));
    }
    let summary = per_layer.iter().map(|r| LayerSummary::of(r)).collect();
    Ok(SpectrumReport { per_layer, summary })
}

impl SpectrumReport {
    /// Heatmap CSV: header `layer,r0,r1,...`, one row per layer.
    pub fn to_csv(&self) -> String {
        let width = self.per_layer.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("layer");
        for r in 0..width {
            write!(out, ",r{r}").unwrap();
        }
        out.push('\n');
        for (l, row) in self.per_layer.iter().enumerate() {
            write!(out, "{l}").unwrap();
            for v in row {
                write!(out, ",{v:.17e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("layer,lambda_max,lambda_min,frac_gt_0.99,frac_lt_0.01\n");
        for (l, s) in self.summary.iter().enumerate() {
            writeln!(
                out,
                "{l},{:.17e},{:.17e},{:.6},{:.6}",
                s.lambda_max, s.lambda_min, s.frac_near_one, s.frac_near_zero
            )
            .unwrap();
        }
        out
    }
}

/// `λ^s` elementwise: the spectral view of multiplying `A` by `s`.
pub fn apply_spectrum_scaling(lambda: &[f64], s: f64) -> Result<Vec<f64>> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!("scaling factor must be positive, got {s}")));
    }
    Ok(lambda.iter().map(|l| l.powf(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::ssm::{discretize, InitRanges, Scales};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with(a: Vec<f64>) -> SsmLayerParams {
        let n = a.len();
        SsmLayerParams {
            variant: Variant::Mamba,
            d_model: 1,
            d_state: n,
            a_diag: a,
            w_delta: Matrix::zeros(1, 1),
            b_delta: vec![0.0],
            w_b: Matrix::zeros(n, 1),
            w_c: Matrix::zeros(n, 1),
        }
    }

    #[test]
    fn sorted_descending() {
        let s = layer_spectrum(&layer_with(vec![0.1, 2.3, 0.7]));
        let want = [(-0.1f64).exp(), (-0.7f64).exp(), (-2.3f64).exp()];
        for (a, b) in s.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s[0] - 0.9048).abs() < 1e-4 && (s[1] - 0.4966).abs() < 1e-4 && (s[2] - 0.1003).abs() < 1e-4);
        let flat = layer_spectrum(&layer_with(vec![0.4; 5]));
        assert!(flat.iter().all(|v| *v == flat[0]));
    }

    #[test]
    fn mamba2_one_value_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmLayerParams::init(Variant::Mamba2 { heads: 4 }, 8, 16, InitRanges::default(), &mut rng).unwrap();
        assert_eq!(layer_spectrum(&p).len(), 4);
    }

    #[test]
    fn heatmap_shape_and_csv() {
        let layers = vec![layer_with(vec![0.1, 3.0]), layer_with(vec![1.0, 0.2])];
        let rep = spectrum_heatmap(&layers).unwrap();
        assert_eq!(rep.per_layer.len(), 2);
        assert_eq!(rep.per_layer[0], layer_spectrum(&layers[0]));
        let csv = rep.to_csv();
        assert!(csv.starts_with("layer,r0,r1\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(spectrum_heatmap(std::iter::empty()).is_err());
    }

    #[test]
    fn scaling_examples() {
        assert!((apply_spectrum_scaling(&[0.81], 0.5).unwrap()[0] - 0.9).abs() < 1e-15);
        assert_eq!(apply_spectrum_scaling(&[0.3, 0.7], 1.0).unwrap(), vec![0.3, 0.7]);
        let v = apply_spectrum_scaling(&[0.99, 0.01], 0.5).unwrap();
        assert!((v[0] - 0.99f64.sqrt()).abs() < 1e-15 && (v[1] - 0.1).abs() < 1e-15);
        assert!((v[0] - 0.99499).abs() < 1e-5);
        assert!((v[0] / v[1] - 9.9499).abs() < 1e-3);
        assert!(apply_spectrum_scaling(&[0.5], 0.0).is_err());
        assert!(apply_spectrum_scaling(&[0.5], -1.0).is_err());
    }

    proptest! {
        #[test]
        fn scaling_preserves_order(a in proptest::collection::vec(0.001f64..10.0, 1..20), s in 0.01f64..10.0) {
            let sp = layer_spectrum(&layer_with(a));
            let scaled = apply_spectrum_scaling(&sp, s).unwrap();
            prop_assert!(scaled.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(scaled.iter().all(|v| *v > 0.0 && *v < 1.0));
        }

        #[test]
        fn scaled_discrete_spectrum_is_power(seed in 0u64..5000, s in 0.05f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SsmLayerParams::init(Variant::Mamba, 2, 4, InitRanges::default(), &mut rng).unwrap();
            let x = [0.3, -1.2];
            let base = discretize(&p, &x, &Scales::identity(2)).unwrap();
            let scaled = discretize(&p, &x, &Scales { a: vec![s; 2], delta: vec![1.0; 2] }).unwrap();
            let want = apply_spectrum_scaling(&base.a_bar, s).unwrap();
            for (w, v) in want.iter().zip(&scaled.a_bar) {
                prop_assert!((w - v).abs() < 1e-12);
            }
        }
    }
}
