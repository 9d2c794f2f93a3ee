use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::checkpoint::Checkpoint;
use crate::flows::{Coefficients, NetWeights};

fn inputs(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn targets(x: &Tensor) -> Tensor {
    Tensor::column((0..x.rows()).map(|i| x.row(i).iter().sum::<f64>().sin()).collect())
}

fn model(layers: usize, flow: FlowSpec, m: usize, x: &Tensor) -> Model {
    Model::new(ModelConfig::new(layers, flow, m), x, 11).unwrap()
}

fn ell_value(y: &[f64], mu: &[f64], var: &[f64], noise_var: f64, samples: usize) -> f64 {
    let tape = Tape::new();
    let rows = mu.len();
    let out = Marginals {
        mean: tape.constant(Tensor::column(mu.to_vec())),
        var: tape.constant(Tensor::column(var.to_vec())),
    };
    assert_eq!(rows, y.len() * samples);
    let nv = tape.constant(Tensor::scalar(noise_var));
    ell_closed_form(&Tensor::column(y.to_vec()), &out, &nv, samples)
        .unwrap()
        .item()
}

fn elbo_value(m: &Model, x: &Tensor, y: &Tensor, n: usize, step: u64) -> f64 {
    let tape = Tape::new();
    m.elbo(&tape, x, y, n, step, &NoiseSource::new(3)).unwrap().elbo.item()
}

#[test]
fn ell_hand_values() {
    let v = ell_value(&[0.0], &[0.0], &[0.0], 1.0, 1);
    assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    assert!((v + 0.918_94).abs() < 1e-5);

    // y = μ and var = σ² give −½log(2πσ²) − ½ per term; 2 samples of 3 points.
    let s2 = 0.3;
    let y = [0.5, -1.0, 2.0];
    let mu = [0.5, -1.0, 2.0, 0.5, -1.0, 2.0];
    let v = ell_value(&y, &mu, &[s2; 6], s2, 2);
    let per = -0.5 * (2.0 * PI * s2).ln() - 0.5;
    assert!((v - 3.0 * per).abs() < 1e-12);

    let tape = Tape::new();
    let bad = Marginals {
        mean: tape.constant(Tensor::zeros(5, 1)),
        var: tape.constant(Tensor::zeros(5, 1)),
    };
    assert!(ell_closed_form(&Tensor::zeros(2, 1), &bad, &tape.scalar(1.0), 2).is_err());
}

#[test]
fn config_rules() {
    let c = ModelConfig::new(3, FlowSpec::arcsinh(2), 10);
    assert_eq!(c.flows.len(), 3);
    assert!(c.flows[2].is_identity());
    assert_eq!(c.tag(), "3-DTGP");
    assert_eq!(ModelConfig::new(2, FlowSpec::identity(), 10).tag(), "2-DGP");
    assert!(ModelConfig::new(0, FlowSpec::identity(), 10).validate().is_err());
    let mut c = ModelConfig::new(2, FlowSpec::arcsinh(1), 10);
    c.flows[1] = FlowSpec::arcsinh(1);
    assert!(c.validate().is_err());
    let mut c = ModelConfig::new(2, FlowSpec::arcsinh(1), 10);
    c.widths[1] = 2;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::new(2, FlowSpec::arcsinh(1), 10);
    c.widths[0] = 3;
    let x = inputs(20, 2, 0);
    let m = Model::new(c, &x, 0).unwrap();
    assert_eq!(m.layers[0].d_out(), 3);
    assert_eq!(m.layers[1].d_in(), 3);
    assert!(Model::new(ModelConfig::new(1, FlowSpec::identity(), 5), &Tensor::zeros(0, 2), 0).is_err());
}

#[test]
fn single_layer_trace_is_the_layer_conditional() {
    let x = inputs(7, 2, 1);
    let m = model(1, FlowSpec::identity(), 4, &x);
    let tape = Tape::new();
    let noise = NoiseSource::new(0);
    let trace = m.propagate(&tape, &x, 3, 0, &noise, WeightDraws::Shared).unwrap();
    assert!(trace.hidden.is_empty());
    assert_eq!(trace.kl_u.len(), 1);
    let xv = tape.constant(x.clone());
    let direct = m.layers[0].bind(&tape, &xv, 1, &[]).unwrap().conditional(&xv).unwrap();
    let (mu, var) = (trace.output.mean.value(), trace.output.var.value());
    assert_eq!(mu.rows(), 21);
    for s in 0..3 {
        for b in 0..7 {
            assert_eq!(mu.get(s * 7 + b, 0), direct.mean.value().get(b, 0));
            assert_eq!(var.get(s * 7 + b, 0), direct.var.value().get(b, 0));
        }
    }
}

#[test]
fn hidden_samples_are_keyed_by_step() {
    let x = inputs(6, 1, 2);
    let m = model(2, FlowSpec::arcsinh(1), 5, &x);
    let hidden = |step| {
        let tape = Tape::new();
        let t = m
            .propagate(&tape, &x, 2, step, &NoiseSource::new(1), WeightDraws::Shared)
            .unwrap();
        (*t.hidden[0].value()).clone()
    };
    let a = hidden(0);
    assert_eq!(a.shape().dims(), [12, 1]);
    assert_eq!(a, hidden(0));
    assert_ne!(a, hidden(1));
    assert_ne!(&a.as_slice()[..6], &a.as_slice()[6..]);
}

#[test]
fn identity_flows_leave_samples_unwarped() {
    let x = inputs(6, 1, 3);
    let m = model(2, FlowSpec::identity(), 5, &x);
    let tape = Tape::new();
    let noise = NoiseSource::new(4);
    let t = m.propagate(&tape, &x, 1, 0, &noise, WeightDraws::Shared).unwrap();
    let xv = tape.constant(x.clone());
    let first = m.layers[0].bind(&tape, &xv, 1, &[]).unwrap().conditional(&xv).unwrap();
    let raw = sample_marginals(&first, &noise.layer(0, 0, 6, 1)).unwrap();
    assert_eq!(*t.hidden[0].value(), *raw.value());
}

#[test]
fn elbo_at_the_prior_is_the_scaled_ell() {
    let x = inputs(8, 2, 4);
    let y = targets(&x);
    let mut m = model(3, FlowSpec::steptanh(2, 1), 5, &x);
    for l in &mut m.layers {
        l.set_posterior_to_prior().unwrap();
    }
    let tape = Tape::new();
    let t = m.elbo(&tape, &x, &y, 40, 0, &NoiseSource::new(2)).unwrap();
    assert!(t.kl_u.item().abs() < 1e-9, "{}", t.kl_u.item());
    assert_eq!(t.kl_weights.item(), 0.0);
    assert!((t.elbo.item() - 5.0 * t.ell.item()).abs() < 1e-9);
}

#[test]
fn bayesian_weights_at_the_prior_have_zero_kl() {
    let x = inputs(8, 1, 5);
    let y = targets(&x);
    let mut m = model(2, FlowSpec::arcsinh(1).bayesian(), 4, &x);
    match m.layers[0].flow.coefficients_mut() {
        Coefficients::Net {
            weights: NetWeights::Bayesian(q),
            ..
        } => {
            q.mean.raw_mut().fill(0.0);
            q.log_sigma.raw_mut().fill(0.0);
        }
        other => panic!("unexpected coefficients {other:?}"),
    }
    let tape = Tape::new();
    let t = m.elbo(&tape, &x, &y, 8, 0, &NoiseSource::new(0)).unwrap();
    assert_eq!(t.kl_weights.item(), 0.0);

    let fresh = model(2, FlowSpec::arcsinh(1).bayesian(), 4, &x);
    let tape = Tape::new();
    assert!(
        fresh
            .elbo(&tape, &x, &y, 8, 0, &NoiseSource::new(0))
            .unwrap()
            .kl_weights
            .item()
            > 0.0
    );
}

#[test]
fn elbo_scales_with_dataset_size() {
    let x = inputs(10, 1, 6);
    let y = targets(&x);
    let m = model(2, FlowSpec::arcsinh(1), 4, &x);
    let tape = Tape::new();
    let t = m.elbo(&tape, &x, &y, 10, 0, &NoiseSource::new(1)).unwrap();
    let scaled = elbo_value(&m, &x, &y, 30, 0);
    let tape2 = Tape::new();
    let t2 = m.elbo(&tape2, &x, &y, 30, 0, &NoiseSource::new(3)).unwrap();
    assert!((t2.elbo.item() - scaled).abs() < 1e-12);
    let (ell, kl) = (t2.ell.item(), t2.kl_u.item());
    assert!((scaled - (3.0 * ell - kl)).abs() < 1e-9);
    assert!(t.elbo.item().is_finite());
    assert!(m
        .elbo(&Tape::new(), &x, &Tensor::zeros(9, 1), 10, 0, &NoiseSource::new(0))
        .is_err());
}

fn hand_mixture(means: &[f64], vars: &[f64], noise_var: f64) -> Mixture {
    Mixture {
        means: Tensor::column(means.to_vec()),
        vars: Tensor::column(vars.to_vec()),
        noise_var,
    }
}

#[test]
fn mixture_density_hand_values() {
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    let mix = hand_mixture(&[0.0, 1.0, -1.0], &[1.0, 1.0, 1.0], 0.0);
    let expect = ((phi(0.0) + 2.0 * phi(1.0)) / 3.0).ln();
    assert!((mix.log_density_at(0, 0.0) - expect).abs() < 1e-14);

    let one = hand_mixture(&[0.4], &[0.5], 0.25);
    let direct = -0.5 * ((2.0 * PI * 0.75).ln() + (1.1f64 - 0.4).powi(2) / 0.75);
    assert!((one.log_density_at(0, 1.1) - direct).abs() < 1e-14);
    let same = hand_mixture(&[0.4; 9], &[0.5; 9], 0.25);
    assert!((same.log_density_at(0, 1.1) - direct).abs() < 1e-13);

    // Far tails stay finite through the log-sum-exp.
    assert!(mix.log_density_at(0, 60.0).is_finite());

    assert!((mix.mean()[0] - 0.0).abs() < 1e-15);
    assert!((mix.variance()[0] - (1.0 + 2.0 / 3.0)).abs() < 1e-14);
    assert!((mix.cdf_at(0, 0.0) - 0.5).abs() < 1e-14);
    let q = mix.quantile_at(0, 0.975);
    assert!((mix.cdf_at(0, q) - 0.975).abs() < 1e-10);
}

#[test]
fn mixture_density_integrates_to_one() {
    let mix = hand_mixture(&[-1.5, 0.2, 2.0, 2.1], &[0.1, 0.5, 0.02, 0.3], 0.01);
    let (m, sd) = (mix.mean()[0], mix.variance()[0].sqrt());
    let n = 20_000;
    let (a, b) = (m - 10.0 * sd, m + 10.0 * sd);
    let h = (b - a) / n as f64;
    let mut integral = 0.0;
    for k in 0..=n {
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        integral += w * mix.log_density_at(0, a + k as f64 * h).exp();
    }
    assert!((integral * h - 1.0).abs() < 1e-6);
}

#[test]
fn single_layer_prediction_has_identical_components() {
    let x = inputs(20, 2, 7);
    let m = model(1, FlowSpec::identity(), 6, &x);
    let mix = m.predict(&inputs(5, 2, 8), 4, &NoiseSource::new(0)).unwrap();
    assert_eq!((mix.samples(), mix.points()), (4, 5));
    for s in 1..4 {
        assert_eq!(mix.means.row(s), mix.means.row(0));
        assert_eq!(mix.vars.row(s), mix.vars.row(0));
    }
    assert_eq!(mix.noise_var, m.noise_variance());
}

#[test]
fn prediction_chunks_agree_with_single_batches() {
    let x = inputs(30, 1, 9);
    let m = model(2, FlowSpec::arcsinh(1), 6, &x);
    let xs = inputs(PREDICT_CHUNK + 5, 1, 10);
    let noise = NoiseSource::new(1);
    let all = m.predict(&xs, 3, &noise).unwrap();
    assert_eq!(all.points(), PREDICT_CHUNK + 5);
    assert!(all.means.is_finite() && all.vars.is_finite());
    let head = m
        .predict(&xs.select_rows(&(0..PREDICT_CHUNK).collect::<Vec<_>>()), 3, &noise)
        .unwrap();
    for s in 0..3 {
        assert_eq!(&all.means.row(s)[..PREDICT_CHUNK], head.means.row(s));
    }
}

#[test]
fn prior_draws_match_the_kernel_covariance() {
    let x = Tensor::column(vec![-1.0, -0.3, 0.4, 1.5]);
    let m = model(1, FlowSpec::identity(), 3, &x);
    let noise = NoiseSource::new(21);
    let n = 10_000;
    let mut cov = Tensor::zeros(4, 4);
    for d in 0..n {
        let f = m.prior_sample(&x, &noise, d).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = cov.get(i, j) + f.get(i, 0) * f.get(j, 0) / n as f64;
                cov.set(i, j, v);
            }
        }
    }
    let k = |a: f64, b: f64| INIT_VARIANCE * (-0.5 * (a - b).powi(2) / INIT_LENGTHSCALE.powi(2)).exp();
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..4 {
        for j in 0..4 {
            let kij = k(x.get(i, 0), x.get(j, 0));
            diff += (cov.get(i, j) - kij).powi(2);
            norm += kij * kij;
        }
    }
    assert!((diff / norm).sqrt() < 0.05, "relative error {}", (diff / norm).sqrt());
}

#[test]
fn prior_draws_collapse_without_kernel_variance() {
    let x = inputs(10, 1, 12);
    let mut m = model(2, FlowSpec::arcsinh(1), 4, &x);
    for l in &mut m.layers {
        *l.kernel.log_variance.raw_mut() = Tensor::scalar(1e-12f64.ln());
    }
    let noise = NoiseSource::new(2);
    let f = m.prior_sample(&x, &noise, 0).unwrap();
    assert!(f.as_slice().iter().all(|v| v.abs() < 1e-4), "{f:?}");
    assert_eq!(f, m.prior_sample(&x, &noise, 0).unwrap());
    let fresh = model(2, FlowSpec::arcsinh(1), 4, &x);
    assert_ne!(
        fresh.prior_sample(&x, &noise, 0).unwrap(),
        fresh.prior_sample(&x, &noise, 1).unwrap()
    );

    // A single zero-mean layer collapses to zero.
    let mut single = model(1, FlowSpec::identity(), 4, &x);
    *single.layers[0].kernel.log_variance.raw_mut() = Tensor::scalar(1e-12f64.ln());
    assert!(single
        .prior_sample(&x, &noise, 3)
        .unwrap()
        .as_slice()
        .iter()
        .all(|v| v.abs() < 1e-5));
}

#[test]
fn checkpoint_reload_is_bit_identical() {
    let x = inputs(12, 2, 13);
    let y = targets(&x);
    let mut m = model(2, FlowSpec::steptanh(2, 1).bayesian(), 5, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<f64> = m
        .flat_raw()
        .iter()
        .map(|v| v + rng.random_range(-0.1..0.1) / 3.0)
        .collect();
    m.set_flat_raw(&raw);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::new(m.clone(), None, None).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, m);
    assert_eq!(
        elbo_value(&back.model, &x, &y, 12, 4).to_bits(),
        elbo_value(&m, &x, &y, 12, 4).to_bits()
    );

    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"format_version\":1", "\"format_version\":9");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(Error::CheckpointVersion { found: 9, expected: 1 })
    ));
}
