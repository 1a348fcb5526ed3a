use mimo_oamp::cg::CgConfig;
use mimo_oamp::channel::*;
use mimo_oamp::constellation::Constellation;
use mimo_oamp::detector::*;
use mimo_oamp::trainer::*;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;

struct FixedSet { sys: Vec<RealLinearSystem>, pre: Vec<Precomputed>, bits: Vec<Vec<u8>> }

fn build_set(trials: usize, seed: u64, snr: f64) -> FixedSet {
    let c = Constellation::new(4).unwrap();
    let mut sys = Vec::new(); let mut pre = Vec::new(); let mut bits_v = Vec::new();
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let g = sample_rayleigh(8, 8, &mut rng);
        let s = ComplexLinearSystem::new(g, "s");
        let bits: Vec<u8> = (0..16).map(|_| rng.random_range(0..2u8)).collect();
        let u = DVector::from_vec(c.map_bits(&bits).unwrap());
        let (y, s2) = transmit(&s, &u, snr, &mut rng).unwrap();
        let real = realify(&s, &y, s2).unwrap();
        pre.push(Precomputed::new(&real.c, LeStrategy::DirectInverse).unwrap());
        sys.push(real); bits_v.push(bits);
    }
    FixedSet { sys, pre, bits: bits_v }
}

fn ber_on_set(params: &NetParams, cfg: &DetectorConfig, set: &FixedSet) -> f64 {
    use rayon::prelude::*;
    let c = &cfg.constellation;
    let errs: usize = (0..set.sys.len()).into_par_iter().map(|i| {
        let got = detect_precomputed(&set.sys[i], params, cfg, &set.pre[i]).unwrap().u_hat;
        let gb = c.demap_hard(complexify_vector(&got).as_slice());
        gb.iter().zip(&set.bits[i]).filter(|(a, b)| a != b).count()
    }).sum();
    errs as f64 / (set.sys.len() * 16) as f64
}

fn main() {
    let c = Constellation::new(4).unwrap();
    let cfg = DetectorConfig::new(c.clone()).with_strategy(LeStrategy::DirectInverse);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for snr in [18.0f64, 25.0] {
        let trials = if snr > 20.0 { 40_000 } else { 12_000 };
        let tune = build_set(trials, 555, snr);
        let hold = build_set(trials, 4242, snr);
        let base = ber_on_set(&NetParams::identity(5), &cfg, &hold);
        // train briefly at this snr then local-search
        let mut tcfg = TrainConfig::new(SampleScenario::Rayleigh { nt: 8, nr: 8 }, snr, 5, cfg.clone());
        tcfg.epochs = 60; tcfg.samples_per_epoch = 500; tcfg.batch_size = 100;
        tcfg.learning_rate = 0.02; tcfg.val_size = 1000; tcfg.seed = 5;
        let out = train(&tcfg).unwrap();
        let mut best = out.params.to_flat();
        let mut best_ber = ber_on_set(&out.params, &cfg, &tune);
        let mut scale = 0.3;
        for _round in 0..10 {
            let mut improved = false;
            for _ in 0..30 {
                let cand: Vec<f64> = best.iter().map(|&p| p + scale * rng.random_range(-1.0..1.0f64)).collect();
                let b = ber_on_set(&NetParams::from_flat(&cand).unwrap(), &cfg, &tune);
                if b < best_ber { best_ber = b; best = cand; improved = true; }
            }
            if !improved { scale *= 0.6; }
        }
        let h = ber_on_set(&NetParams::from_flat(&best).unwrap(), &cfg, &hold);
        println!("snr {snr}: proto {base:.4e}  net-ceiling {h:.4e}  ratio {:.2}", base / h);
    }
}
