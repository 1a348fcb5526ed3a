//! Supervised tuning of the per-layer detector scalars on generated
//! (label, observation, channel) samples: an l2 objective, central
//! finite-difference gradients over the 4T scalars, and Adam.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{
    apply_kronecker, build_cpfree_matrices, complexify_vector, realify, realify_vector,
    sample_multipath, sample_rayleigh, transmit, trial_rng, ComplexLinearSystem, RealLinearSystem,
};
use crate::constellation::Constellation;
use crate::detector::{detect_precomputed, DetectorConfig, NetParams, Precomputed};
use crate::error::{Error, Result};

/// Channel model a training sample is drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleScenario {
    Rayleigh { nt: usize, nr: usize },
    Kronecker { nt: usize, nr: usize, rho: f64 },
    /// Guard-free block system with `l` equal-power multipath taps; the
    /// sample carries the interference-free model y = C u + w.
    CpFree { nt: usize, nr: usize, nc: usize, l: usize },
}

/// One training sample: a real-decomposed system with its label attached
/// and the per-system precomputation reused across every loss evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sys: RealLinearSystem,
    pub pre: Precomputed,
}

/// Training configuration. Desk-scale defaults; the full-scale protocol
/// (1000 epochs, 5000 samples per epoch) remains expressible.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub scenario: SampleScenario,
    pub snr_db: f64,
    pub layers: usize,
    pub detector: DetectorConfig,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Relative central-difference step (scaled by max(|p|, 1) per scalar).
    pub fd_step: f64,
    pub val_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(scenario: SampleScenario, snr_db: f64, layers: usize, detector: DetectorConfig) -> Self {
        Self {
            scenario,
            snr_db,
            layers,
            detector,
            epochs: 50,
            samples_per_epoch: 500,
            batch_size: 100,
            learning_rate: 0.001,
            lr_decay: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            fd_step: 1e-4,
            val_size: 500,
            seed: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidInput("fd_step must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if self.layers < 1 {
            return Err(Error::InvalidInput("layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `count` fresh samples: new channel, uniform symbols, calibrated
/// noise per sample.
pub fn generate_dataset(
    scenario: SampleScenario,
    constellation: &Constellation,
    snr_db: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    use rand::Rng;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (g, label) = match scenario {
            SampleScenario::Rayleigh { nt, nr } => (sample_rayleigh(nr, nt, rng), "rayleigh"),
            SampleScenario::Kronecker { nt, nr, rho } => {
                (apply_kronecker(&sample_rayleigh(nr, nt, rng), rho)?, "kronecker")
            }
            SampleScenario::CpFree { nt, nr, nc, l } => {
                let ch = sample_multipath(nr, nt, l, rng)?;
                (build_cpfree_matrices(&ch, nc)?.c, "cpfree")
            }
        };
        let sys = ComplexLinearSystem::new(g, label);
        let n_bits = sys.u_dim() * constellation.bits_per_symbol();
        let bits: Vec<u8> = (0..n_bits).map(|_| rng.random_range(0..2u8)).collect();
        let u = DVector::from_vec(constellation.map_bits(&bits)?);
        let (y, sigma2) = transmit(&sys, &u, snr_db, rng)?;
        let mut real = realify(&sys, &y, sigma2)?;
        real.u_truth = Some(realify_vector(&u));
        let pre = Precomputed::new(&real.c, crate::detector::LeStrategy::Cg)?;
        out.push(Sample { sys: real, pre });
    }
    Ok(out)
}

/// Mean squared estimation error of the detector output over a batch.
/// Per-sample losses are evaluated in parallel and reduced in sample
/// order, so the result does not depend on scheduling.
pub fn l2_loss(params: &NetParams, batch: &[Sample], dcfg: &DetectorConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss over an empty batch".into()));
    }
    let losses: Result<Vec<f64>> = batch
        .par_iter()
        .map(|s| {
            let det = detect_precomputed(&s.sys, params, dcfg, &s.pre)?;
            let truth = s.sys.u_truth.as_ref().expect("training sample carries its label");
            Ok((det.u_hat - truth).norm_squared())
        })
        .collect();
    Ok(losses?.iter().sum::<f64>() / batch.len() as f64)
}

/// Central finite differences of `f` at `x` with per-coordinate steps.
pub fn central_diff<F>(f: F, x: &[f64], steps: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let h = steps[k];
        probe[k] = x[k] + h;
        let up = f(&probe)?;
        probe[k] = x[k] - h;
        let down = f(&probe)?;
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite loss at perturbed coordinate {k}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient of the batch loss over the 4T scalars via central
/// differences; 8T loss evaluations. The step per scalar is
/// `fd_step * max(|p|, 1)`.
pub fn grad_fd(
    params: &NetParams,
    batch: &[Sample],
    dcfg: &DetectorConfig,
    fd_step: f64,
) -> Result<Vec<f64>> {
    if !(fd_step > 0.0) {
        return Err(Error::InvalidInput("fd_step must be positive".into()));
    }
    let flat = params.to_flat();
    let steps: Vec<f64> = flat.iter().map(|p| fd_step * p.abs().max(1.0)).collect();
    central_diff(
        |x| l2_loss(&NetParams::from_flat(x)?, batch, dcfg),
        &flat,
        &steps,
    )
}

/// Adam moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], step: 0 }
    }
}

/// One bias-corrected Adam update; returns the new parameter vector.
pub fn adam_step(
    params: &[f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Vec<f64> {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * grad[k];
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * grad[k] * grad[k];
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        out.push(params[k] - lr * m_hat / (v_hat.sqrt() + eps));
    }
    out
}

/// Bit error rate of the detector with the given scalars over a sample set.
pub fn ber_on(
    params: &NetParams,
    set: &[Sample],
    dcfg: &DetectorConfig,
    constellation: &Constellation,
) -> Result<f64> {
    let counts: Result<Vec<(usize, usize)>> = set
        .par_iter()
        .map(|s| {
            let det = detect_precomputed(&s.sys, params, dcfg, &s.pre)?;
            let truth = s.sys.u_truth.as_ref().expect("sample carries its label");
            let want = constellation.demap_hard(complexify_vector(truth).as_slice());
            let got = constellation.demap_hard(complexify_vector(&det.u_hat).as_slice());
            let errs = want.iter().zip(&got).filter(|(a, b)| a != b).count();
            Ok((errs, want.len()))
        })
        .collect();
    let (errs, bits) = counts?
        .iter()
        .fold((0usize, 0usize), |acc, &(e, b)| (acc.0 + e, acc.1 + b));
    Ok(errs as f64 / bits as f64)
}

/// Training output: the best-validation scalars plus per-epoch histories.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Mean batch loss per epoch (evaluated at the pre-update parameters).
    pub loss_history: Vec<f64>,
    /// Validation BER per epoch; entry 0 is the identity initialization.
    pub val_ber_history: Vec<f64>,
}

/// Mini-batch training from identity initialization with best-validation
/// checkpointing. Deterministic for a fixed seed: validation uses RNG
/// stream 0, epoch e uses stream e.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let constellation = cfg.detector.constellation.clone();
    let val = generate_dataset(
        cfg.scenario,
        &constellation,
        cfg.snr_db,
        cfg.val_size,
        &mut trial_rng(cfg.seed, 0),
    )?;

    let mut params = NetParams::identity(cfg.layers);
    let mut state = AdamState::new(4 * cfg.layers);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut val_ber_history = Vec::with_capacity(cfg.epochs + 1);

    let ber0 = ber_on(&params, &val, &cfg.detector, &constellation)?;
    val_ber_history.push(ber0);
    let mut best = (params.clone(), ber0);

    let mut lr = cfg.learning_rate;
    for epoch in 1..=cfg.epochs {
        let data = generate_dataset(
            cfg.scenario,
            &constellation,
            cfg.snr_db,
            cfg.samples_per_epoch,
            &mut trial_rng(cfg.seed, epoch as u64),
        )?;
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in data.chunks(cfg.batch_size) {
            epoch_loss += l2_loss(&params, batch, &cfg.detector)?;
            batches += 1;
            let grad = grad_fd(&params, batch, &cfg.detector, cfg.fd_step)?;
            let flat = adam_step(
                &params.to_flat(),
                &grad,
                &mut state,
                lr,
                (cfg.adam_beta1, cfg.adam_beta2),
                cfg.adam_eps,
            );
            params = NetParams::from_flat(&flat)?;
        }
        lr *= cfg.lr_decay;
        loss_history.push(epoch_loss / batches as f64);
        let val_ber = ber_on(&params, &val, &cfg.detector, &constellation)?;
        val_ber_history.push(val_ber);
        if val_ber < best.1 {
            best = (params.clone(), val_ber);
        }
    }
    Ok(TrainOutcome { params: best.0, loss_history, val_ber_history })
}

/// Writes scalars in the params-file format: a `T=<n>` header, then one
/// `t,gamma,theta,phi,xi` line per layer at 17 significant digits.
pub fn save_params(path: &Path, params: &NetParams) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "T={}", params.num_layers()).unwrap();
    for (t, l) in params.layers.iter().enumerate() {
        writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", t + 1, l.gamma, l.theta, l.phi, l.xi)
            .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads scalars from the params-file format.
pub fn load_params(path: &Path) -> Result<NetParams> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "missing `T=<n>` header".into(),
    })?;
    let t: usize = header
        .strip_prefix("T=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            path: pstr.clone(),
            line: 1,
            msg: format!("expected `T=<n>`, got `{header}`"),
        })?;
    let mut layers = Vec::with_capacity(t);
    for (idx, row) in lines {
        let line = idx + 1;
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: pstr,
                line,
                msg: format!("expected `t,gamma,theta,phi,xi`, got {} fields", fields.len()),
            });
        }
        let expect = layers.len() + 1;
        let t_field: usize = fields[0].trim().parse().map_err(|_| Error::Parse {
            path: pstr.clone(),
            line,
            msg: format!("cannot parse layer index from `{}`", fields[0]),
        })?;
        if t_field != expect {
            return Err(Error::Parse {
                path: pstr,
                line,
                msg: format!("layer index {t_field} out of order, expected {expect}"),
            });
        }
        let mut vals = [0.0f64; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = f.trim().parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("cannot parse float from `{f}`"),
            })?;
        }
        layers.push(crate::detector::LayerParams {
            gamma: vals[0],
            theta: vals[1],
            phi: vals[2],
            xi: vals[3],
        });
    }
    if layers.len() != t {
        return Err(Error::Parse {
            path: pstr,
            line: text.lines().count(),
            msg: format!("header promised {t} layers, found {}", layers.len()),
        });
    }
    NetParams::from_flat(
        &layers.iter().flat_map(|l| [l.gamma, l.theta, l.phi, l.xi]).collect::<Vec<_>>(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{LeStrategy, NetParams};

    fn qpsk() -> Constellation {
        Constellation::new(4).unwrap()
    }

    fn small_dataset(count: usize, seed: u64) -> Vec<Sample> {
        generate_dataset(
            SampleScenario::Rayleigh { nt: 4, nr: 4 },
            &qpsk(),
            12.0,
            count,
            &mut trial_rng(seed, 1),
        )
        .unwrap()
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = small_dataset(8, 3);
        let b = small_dataset(8, 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sys.c, y.sys.c);
            assert_eq!(x.sys.y, y.sys.y);
            assert_eq!(x.sys.u_truth, y.sys.u_truth);
        }
    }

    #[test]
    fn dataset_labels_uniform_chi_squared() {
        let c = qpsk();
        let set = generate_dataset(
            SampleScenario::Rayleigh { nt: 4, nr: 4 },
            &c,
            12.0,
            // 4 symbols per sample.
            25_000,
            &mut trial_rng(7, 1),
        )
        .unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for s in &set {
            let syms = complexify_vector(s.sys.u_truth.as_ref().unwrap());
            for label_bits in c.demap_hard(syms.as_slice()).chunks(2) {
                counts[(label_bits[0] * 2 + label_bits[1]) as usize] += 1;
                total += 1;
            }
        }
        let expected = total as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&n| (n as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-squared with 3 degrees of freedom.
        assert!(chi2 < 16.266, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn dataset_snr_calibrated() {
        let set = generate_dataset(
            SampleScenario::Rayleigh { nt: 4, nr: 4 },
            &qpsk(),
            12.0,
            10_000,
            &mut trial_rng(8, 1),
        )
        .unwrap();
        let mut sig = 0.0;
        let mut noise = 0.0;
        for s in &set {
            let clean = &s.sys.c * s.sys.u_truth.as_ref().unwrap();
            sig += clean.norm_squared();
            noise += (&s.sys.y - clean).norm_squared();
        }
        let est = 10.0 * (sig / noise).log10();
        assert!((est - 12.0).abs() < 0.2, "empirical SNR {est}");
    }

    #[test]
    fn loss_zero_on_exact_recovery_and_batch_invariances() {
        let c = qpsk();
        let dcfg = DetectorConfig::new(c.clone()).with_strategy(LeStrategy::DirectInverse);
        // Identity channel, vanishing noise: one layer recovers the label
        // up to the denoiser contraction at tiny tau2.
        let bits = vec![0, 1, 1, 0];
        let u = DVector::from_vec(c.map_bits(&bits).unwrap());
        let g = nalgebra::DMatrix::from_diagonal_element(2, 2, num_complex::Complex64::new(1.0, 0.0));
        let sys = ComplexLinearSystem::new(g.clone(), "t");
        let y = &g * &u;
        let mut real = realify(&sys, &y, 1e-24).unwrap();
        real.u_truth = Some(realify_vector(&u));
        let pre = Precomputed::new(&real.c, LeStrategy::DirectInverse).unwrap();
        let sample = Sample { sys: real, pre };
        let loss = l2_loss(&NetParams::identity(1), &[sample], &dcfg).unwrap();
        assert!(loss < 1e-12, "loss {loss}");

        let set = small_dataset(6, 5);
        let params = NetParams::identity(3);
        let base = l2_loss(&params, &set, &dcfg).unwrap();
        let mut permuted = set.clone();
        permuted.reverse();
        assert!((l2_loss(&params, &permuted, &dcfg).unwrap() - base).abs() < 1e-12);
        let doubled: Vec<Sample> = set.iter().chain(set.iter()).cloned().collect();
        assert!((l2_loss(&params, &doubled, &dcfg).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn central_diff_exact_on_quadratic() {
        let f = |x: &[f64]| Ok(2.0 * x[0] * x[0] + 3.0 * x[1] * x[1] - x[0] * x[1] + 4.0);
        let x = [1.5, -2.0];
        let g = central_diff(f, &x, &[1e-4, 1e-4]).unwrap();
        assert!((g[0] - (4.0 * x[0] - x[1])).abs() < 1e-8);
        assert!((g[1] - (6.0 * x[1] - x[0])).abs() < 1e-8);
    }

    #[test]
    fn grad_matches_analytic_final_layer_derivative() {
        let c = qpsk();
        let dcfg = DetectorConfig::new(c.clone()).with_strategy(LeStrategy::DirectInverse);
        let batch = small_dataset(20, 9);
        let t = 3;
        let params = NetParams::identity(t);
        let grad = grad_fd(&params, &batch, &dcfg, 1e-5).unwrap();
        assert!(grad.iter().map(|g| g * g).sum::<f64>() > 0.0);

        // The last layer's output is u = phi (denoise(r) - xi r); at the
        // evaluation point d loss / d phi = mean 2 <u - label, u / phi>.
        let mut analytic = 0.0;
        for s in &batch {
            let det = detect_precomputed(&s.sys, &params, &dcfg, &s.pre).unwrap();
            let truth = s.sys.u_truth.as_ref().unwrap();
            analytic += 2.0 * (&det.u_hat - truth).dot(&det.u_hat);
        }
        analytic /= batch.len() as f64;
        let phi_last = grad[4 * (t - 1) + 2];
        assert!(
            (phi_last - analytic).abs() < 1e-4 * analytic.abs().max(1e-3),
            "fd {phi_last} vs analytic {analytic}"
        );
    }

    #[test]
    fn adam_basics() {
        let mut state = AdamState::new(2);
        let p = vec![1.0, -0.5];
        let q = adam_step(&p, &[0.0, 0.0], &mut state, 0.1, (0.9, 0.999), 1e-8);
        assert_eq!(p, q);

        // First step moves each coordinate by about lr in the gradient
        // sign direction.
        let mut state = AdamState::new(2);
        let q = adam_step(&p, &[0.3, -2.0], &mut state, 0.1, (0.9, 0.999), 1e-8);
        assert!((q[0] - (p[0] - 0.1)).abs() < 1e-6);
        assert!((q[1] - (p[1] + 0.1)).abs() < 1e-6);

        // Minimizing x^2 from 1.0.
        let mut x = vec![1.0];
        let mut state = AdamState::new(1);
        let mut reached = None;
        for step in 0..200 {
            let g = vec![2.0 * x[0]];
            x = adam_step(&x, &g, &mut state, 0.1, (0.9, 0.999), 1e-8);
            if x[0].abs() < 0.01 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x[0]);
    }

    #[test]
    fn params_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        let mut p = NetParams::identity(3);
        p.layers[1].gamma = 1.2345678901234567;
        p.layers[2].xi = -0.07;
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);

        std::fs::write(&path, "T=2\n1,1,1,1,0\n").unwrap();
        assert!(load_params(&path).unwrap_err().to_string().contains("promised 2"));
        std::fs::write(&path, "T=1\n2,1,1,1,0\n").unwrap();
        assert!(load_params(&path).unwrap_err().to_string().contains("out of order"));
        std::fs::write(&path, "bad\n").unwrap();
        assert!(load_params(&path).is_err());
    }
}
