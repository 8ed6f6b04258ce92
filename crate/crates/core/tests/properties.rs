use gaussvol::calibrate::{invert_wing, IvSlice, SlicePoint};
use gaussvol::chaos::{chaos_constants, sample_integrated_variance, tail_rate_mle};
use gaussvol::model::{CovarianceKernel, MeanFunction, ModelSpec};
use gaussvol::pricing::{points_from_csv, points_to_csv, price_calls_mixture};
use gaussvol::smile::{corollary_coefficients, wing_expansion};
use gaussvol::spectrum::model_spectrum;
use gaussvol::{Direction, PricedPoint, SimConfig, Spectrum};
use proptest::prelude::*;

fn stein_stein() -> ModelSpec {
    ModelSpec::stein_stein(0.2, 7.0, 1.2, 1.0 / 12.0)
}

#[test]
fn default_truncation_keeps_the_trace_and_obeys_bessel() {
    for spec in [stein_stein(), ModelSpec::stein_stein(0.1, 2.0, 0.5, 1.0)] {
        let sp = model_spectrum(&spec, None, &[]).unwrap();
        let kept: f64 = sp.eigenvalues.iter().sum();
        assert!(kept >= 0.999 * sp.trace && kept <= sp.trace * (1.0 + 1e-12));
        let bessel: f64 = sp.delta_coeffs.iter().map(|d| d * d).sum();
        assert!(bessel <= sp.s * (1.0 + 1e-12));
        // mean lies in the range of the operator here, so Bessel is nearly tight
        assert!(sp.tau < 1e-6 * sp.s);
    }
}

#[test]
fn leading_eigenfunction_has_nonnegative_integral() {
    let sp = model_spectrum(&stein_stein(), Some(16), &[]).unwrap();
    let dt = sp.grid[1] - sp.grid[0];
    for e in &sp.eigenfunctions {
        let integral: f64 = e.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dt).sum();
        assert!(integral >= -1e-12, "{integral}");
    }
    assert!(sp.delta_coeffs[0] > 0.0);
}

#[test]
fn tail_constants_stable_under_doubled_truncation() {
    let spec = stein_stein();
    let base = model_spectrum(&spec, None, &[]).unwrap();
    let doubled = model_spectrum(&spec, Some(2 * base.truncation_count), &[]).unwrap();
    let (a, b) = (chaos_constants(&base, spec.maturity).unwrap(), chaos_constants(&doubled, spec.maturity).unwrap());
    assert!((a.a / b.a - 1.0).abs() < 1e-8, "{} vs {}", a.a, b.a);
    assert!((a.delta / b.delta - 1.0).abs() < 1e-8);
}

#[test]
fn delta_ignores_signs_and_rotations_of_the_top_eigenspace() {
    let t = 0.5;
    let base = Spectrum::from_values(t, vec![0.01, 0.01, 0.002], vec![0.03, -0.02, 0.01], 0.002, 0.03).unwrap();
    let reference = chaos_constants(&base, t).unwrap();
    assert_eq!(reference.n1, 2);
    for angle in [0.3_f64, 1.1, 2.9] {
        let (c, s) = (angle.cos(), angle.sin());
        let (d1, d2) = (0.03, -0.02);
        for sign in [1.0, -1.0] {
            let rotated = vec![sign * (c * d1 - s * d2), s * d1 + c * d2, -0.01];
            let sp = Spectrum::from_values(t, vec![0.01, 0.01, 0.002], rotated, 0.002, 0.03).unwrap();
            let k = chaos_constants(&sp, t).unwrap();
            assert!((k.delta - reference.delta).abs() < 1e-14);
            assert!((k.a - reference.a).abs() < 1e-12 * reference.a);
        }
    }
}

#[test]
fn sampled_tails_decay_at_the_leading_eigenvalue() {
    let models = [
        ModelSpec {
            mean: MeanFunction::Constant { level: 0.0 },
            kernel: CovarianceKernel::BrownianMotion { scale: 0.8 },
            maturity: 0.5,
            r: 0.0,
            s0: 1.0,
        },
        ModelSpec {
            mean: MeanFunction::Constant { level: 0.0 },
            kernel: CovarianceKernel::OuStationary { q: 3.0, sigma: 1.0 },
            maturity: 0.5,
            r: 0.0,
            s0: 1.0,
        },
        stein_stein(),
    ];
    for spec in models {
        let sp = model_spectrum(&spec, Some(64), &[256, 512]).unwrap();
        let k = chaos_constants(&sp, spec.maturity).unwrap();
        let mut xs = sample_integrated_variance(&sp, 2_000_000, 11);
        xs.sort_by(f64::total_cmp);
        let u = xs[xs.len() - 4_000];
        let (a, b) = if k.delta > 0.0 {
            ((k.n1 as f64 - 3.0) / 4.0, (k.delta / k.lambda1).sqrt())
        } else {
            ((k.n1 as f64 - 2.0) / 2.0, 0.0)
        };
        let beta = tail_rate_mle(&xs, u, a, b).unwrap();
        let target = 1.0 / (2.0 * k.lambda1);
        assert!((beta / target - 1.0).abs() < 0.05, "{:?}: {beta} vs {target}", spec.kernel);
    }
}

#[test]
fn mirrored_wings_share_coefficients() {
    let spec = stein_stein();
    let sp = model_spectrum(&spec, None, &[]).unwrap();
    let k = chaos_constants(&sp, spec.maturity).unwrap();
    let small = wing_expansion::<f64>(&k, spec.maturity, Direction::SmallStrike).unwrap();
    let large = wing_expansion::<f64>(&k, spec.maturity, Direction::LargeStrike).unwrap();
    assert_eq!((small.l, small.m, small.loglog_coeff), (large.l, large.m, large.loglog_coeff));
    assert_eq!(small.mirror(), large);
}

#[test]
fn prices_respect_no_arbitrage_bounds() {
    let spec = ModelSpec { r: 0.03, s0: 100.0, ..ModelSpec::stein_stein(0.2, 7.0, 1.2, 0.5) };
    let sp = model_spectrum(&spec, None, &[]).unwrap();
    let strikes: Vec<f64> = (0..9).map(|i| 60.0 + 10.0 * i as f64).collect();
    let run = price_calls_mixture(&sp, &spec, &strikes, &SimConfig { n_paths: 20_000, ..SimConfig::default() }).unwrap();
    let disc = (-spec.r * spec.maturity).exp();
    for p in &run.points {
        assert!(p.price > (spec.s0 - p.strike * disc).max(0.0) && p.price < spec.s0, "{p:?}");
        assert!(p.iv.is_some_and(|v| v > 0.0));
    }
}

proptest! {
    #[test]
    fn inversion_undoes_the_corollary(lambda in 1e-4..1e-1f64, delta in 0.0..0.2f64, t in 0.05..1.0f64) {
        let (l, m) = corollary_coefficients(lambda, delta, t);
        prop_assume!(t * t * l.powi(4) < 4.0);
        let (l2, d2) = invert_wing(l, m, t).unwrap();
        prop_assert!((l2 / lambda - 1.0).abs() < 1e-12);
        prop_assert!((d2 - delta).abs() < 1e-12 * delta.max(1e-3));
    }

    #[test]
    fn recovered_lambda_ignores_m(lambda in 1e-4..1e-1f64, t in 0.05..1.0f64, dm in -0.5..0.5f64) {
        let (l, m) = corollary_coefficients(lambda, 0.05, t);
        prop_assume!(t * t * l.powi(4) < 4.0);
        let a = invert_wing(l, m, t).unwrap().0;
        let b = invert_wing(l, m + dm, t).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn priced_points_round_trip_through_csv(
        rows in prop::collection::vec((-3.0..3.0f64, 1e-9..1.0f64, 0.0..1e-2f64, prop::option::of(0.01..3.0f64)), 1..20)
    ) {
        let points: Vec<PricedPoint> = rows
            .iter()
            .map(|&(k, price, std_err, iv)| PricedPoint { k, strike: k.exp(), price, std_err, iv })
            .collect();
        let text = points_to_csv(&points).unwrap();
        prop_assert_eq!(points_from_csv(&text).unwrap(), points);
    }

    #[test]
    fn slices_round_trip_through_csv(ivs in prop::collection::vec(0.01..3.0f64, 2..30)) {
        let points: Vec<SlicePoint> = ivs.iter().enumerate().map(|(i, &iv)| SlicePoint { k: -2.0 + 0.037 * i as f64, iv }).collect();
        let text = format!("k,iv\n{}", points.iter().map(|p| format!("{},{}\n", p.k, p.iv)).collect::<String>());
        let slice = IvSlice::from_csv(&text, 0.25, 1.0, 0.0, "generated").unwrap();
        prop_assert_eq!(slice.points, points);
    }
}
