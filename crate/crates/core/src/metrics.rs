//! SSIM, PSNR and the per-pair evaluation report.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{denormalize, SamplePair};
use crate::error::{GleanError, Result};
use crate::model::{clean, GleanModel};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    a.ensure_same_shape(b, what)?;
    a.dims3()
}

/// Mean structural similarity of two `[C, H, W]` images in `[0, 1]`,
/// averaged over channels. Only windows fully inside the image count.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = check_pair(a, b, "ssim")?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(GleanError::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.channel(ch).iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.channel(ch).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1; identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = se / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// `INFINITE` for an infinite PSNR, otherwise three decimals.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "INFINITE".into()
    } else {
        format!("{v:.3}")
    }
}

pub fn parse_psnr(s: &str) -> Option<f64> {
    if s == "INFINITE" {
        Some(f64::INFINITY)
    } else {
        s.parse().ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub ssim_perturbed: f64,
    pub psnr_perturbed: f64,
    pub ssim_cleaned: f64,
    pub psnr_cleaned: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

pub const REPORT_HEADER: &str =
    "id,ssim_perturbed_vs_original,psnr_perturbed_vs_original,ssim_cleaned_vs_original,psnr_cleaned_vs_original";

impl MetricsReport {
    /// Column means, tagged `MEAN`.
    pub fn mean(&self) -> MetricsRow {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&MetricsRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        MetricsRow {
            id: "MEAN".into(),
            ssim_perturbed: avg(|r| r.ssim_perturbed),
            psnr_perturbed: avg(|r| r.psnr_perturbed),
            ssim_cleaned: avg(|r| r.ssim_cleaned),
            psnr_cleaned: avg(|r| r.psnr_cleaned),
        }
    }

    pub fn format_row(r: &MetricsRow) -> String {
        format!(
            "{},{:.6},{},{:.6},{}",
            r.id,
            r.ssim_perturbed,
            format_psnr(r.psnr_perturbed),
            r.ssim_cleaned,
            format_psnr(r.psnr_cleaned)
        )
    }

    /// Header, one line per pair, then the `MEAN` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{}", Self::format_row(r)).unwrap();
        }
        writeln!(out, "{}", Self::format_row(&self.mean())).unwrap();
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| GleanError::io(path, e))
    }
}

/// Scores every pair using `predict` to produce the cloak from the
/// normalized perturbed image. Metrics are taken in `[0, 1]` space.
pub fn evaluate_with<F>(pairs: &[SamplePair], predict: F) -> Result<MetricsReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if pairs.is_empty() {
        return Err(GleanError::config("evaluation set is empty"));
    }
    let rows = pairs
        .par_iter()
        .map(|p| {
            let cloak = predict(&p.perturbed)?;
            let cleaned = denormalize(&clean(&p.perturbed, &cloak)?);
            let original = denormalize(&p.original);
            let perturbed = denormalize(&p.perturbed);
            Ok(MetricsRow {
                id: p.id.clone(),
                ssim_perturbed: ssim(&perturbed, &original)?,
                psnr_perturbed: psnr(&perturbed, &original)?,
                ssim_cleaned: ssim(&cleaned, &original)?,
                psnr_cleaned: psnr(&cleaned, &original)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport { rows })
}

pub fn evaluate(model: &GleanModel, pairs: &[SamplePair]) -> Result<MetricsReport> {
    evaluate_with(pairs, |x| model.predict_cloak(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor {
        Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct per-window SSIM with an explicit 2-D Gaussian.
    pub(crate) fn brute_force_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let (c, h, w) = a.dims3().unwrap();
        let half = 5.0f64;
        let mut win = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - half, j as f64 - half);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                total += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        for ch in 0..c {
            let (pa, pb) = (a.channel(ch), b.channel(ch));
            let mut s = 0.0;
            let mut n = 0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / total;
                            ma += wt * pa[(y + i) * w + x + j] as f64;
                            mb += wt * pb[(y + i) * w + x + j] as f64;
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wt = win[i][j] / total;
                            let da = pa[(y + i) * w + x + j] as f64 - ma;
                            let db = pb[(y + i) * w + x + j] as f64 - mb;
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
            acc += s / n as f64;
        }
        acc / c as f64
    }

    #[test]
    fn ssim_matches_brute_force() {
        for seed in 0..20 {
            let a = rand_img(seed, 16, 16);
            let b = rand_img(seed + 100, 16, 16);
            let d = (ssim(&a, &b).unwrap() - brute_force_ssim(&a, &b)).abs();
            assert!(d < 1e-6, "seed {seed}: {d}");
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let x = rand_img(1, 24, 20);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let zero = Tensor::zeros(&[3, 16, 16]);
        let one = Tensor::full(&[3, 16, 16], 1.0);
        let expected = 1e-4 / 1.0001;
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_errors() {
        let a = Tensor::zeros(&[3, 10, 16]);
        assert!(ssim(&a, &a).is_err());
        assert!(ssim(&Tensor::zeros(&[3, 16, 16]), &Tensor::zeros(&[3, 16, 24])).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let x = rand_img(2, 8, 8);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(psnr(&x, &x).unwrap()), "INFINITE");
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.6);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-4, "{v}");
        assert_eq!(format_psnr(v), "20.000");
        assert!(psnr(&a, &Tensor::zeros(&[3, 8, 4])).is_err());
    }

    #[test]
    fn psnr_matches_definition() {
        let a = rand_img(3, 16, 16);
        let b = rand_img(4, 16, 16);
        let n = a.numel() as f64;
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / n;
        let direct = -10.0 * mse.log10();
        assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_as_difference_grows() {
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let pattern = rand_img(5, 8, 8).map(|v| v - 0.5);
        let mut last = f64::INFINITY;
        for k in [0.05f32, 0.1, 0.2, 0.4, 0.8] {
            let b = a.add(&pattern.scale(k)).unwrap();
            let v = psnr(&a, &b).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn ssim_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000, scale in 0.0f32..1.0) {
            let a = rand_img(sa, 12, 16);
            let b = a.zip_map(&rand_img(sb, 12, 16), |x, y| x + scale * (y - x)).unwrap();
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9
                || psnr(&a, &b).unwrap().is_infinite());
        }
    }

    fn pairs(n: usize) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                // normalized values in [0.5, 1] keep the residual algebra exact
                let o = Tensor::uniform(&[3, 16, 16], 0.5, 1.0, &mut rng);
                let p = Tensor::uniform(&[3, 16, 16], 0.5, 1.0, &mut rng);
                SamplePair::new(format!("p{i}"), o, p).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_cloak_leaves_metrics_unchanged() {
        let ps = pairs(3);
        let r = evaluate_with(&ps, |x| Ok(Tensor::zeros(x.shape()))).unwrap();
        for row in &r.rows {
            assert_eq!(row.ssim_cleaned, row.ssim_perturbed);
            assert_eq!(row.psnr_cleaned, row.psnr_perturbed);
        }
    }

    #[test]
    fn perfect_oracle_recovers_original() {
        let ps = pairs(3);
        let lookup = |x: &Tensor| {
            let p = ps.iter().find(|p| &p.perturbed == x).unwrap();
            Ok(p.residual.clone())
        };
        let r = evaluate_with(&ps, lookup).unwrap();
        for row in &r.rows {
            assert!((row.ssim_cleaned - 1.0).abs() < 1e-9);
            assert!(row.psnr_cleaned.is_infinite());
        }
        assert!(r.to_csv().lines().last().unwrap().ends_with(",INFINITE"));
    }

    #[test]
    fn report_layout() {
        let ps = pairs(4);
        let r = evaluate_with(&ps, |x| Ok(x.scale(0.01))).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert_eq!(lines[0], REPORT_HEADER);
        assert!(lines[5].starts_with("MEAN,"));
        let mean = r.mean();
        let direct: f64 = r.rows.iter().map(|x| x.ssim_cleaned).sum::<f64>() / 4.0;
        assert!((mean.ssim_cleaned - direct).abs() < 1e-15);
        assert_eq!(csv, evaluate_with(&ps, |x| Ok(x.scale(0.01))).unwrap().to_csv());
        assert!(evaluate_with(&[], |x| Ok(x.clone())).is_err());
    }
}
