use super::*;
use crate::harmonics::eval_sh;
use crate::signal_model::{make_dataset, SimulationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(shells: &[f64], grads: usize, tissues: usize, n: usize, snr: f64) -> crate::signal_model::SimulatedDataset {
    let mut cfg = SimulationConfig::new(shells.to_vec());
    cfg.gradients_per_shell = grads;
    cfg.tissues = tissues;
    cfg.n_voxels = n;
    cfg.snr = snr;
    cfg.seed = 3;
    make_dataset(&cfg).unwrap()
}

fn toy_config(tissues: usize) -> EsdConfig {
    EsdConfig {
        nside_in: 2,
        channels: vec![4],
        polynomial_order: 2,
        tissues,
        fodf_degree: 4,
        lambda_sparsity: 1e-2,
        sigma_cauchy: 0.05,
        ..EsdConfig::default()
    }
}

#[test]
fn config_defaults_and_validation() {
    let c = EsdConfig::default();
    assert_eq!((c.nside_in, c.depth(), c.polynomial_order, c.fodf_degree), (8, 3, 4, 20));
    assert_eq!((c.batch_size, c.max_epochs, c.plateau_patience), (32, 30, 5));
    c.validate().unwrap();
    let parsed: EsdConfig = toml::from_str("lr = 0.005").unwrap();
    assert_eq!(parsed.lr, 0.005);
    assert!(toml::from_str::<EsdConfig>("learning_rate = 0.005").is_err());
    for bad in [
        EsdConfig { sigma_cauchy: 0.0, ..c.clone() },
        EsdConfig { channels: vec![8; 5], ..c.clone() },
        EsdConfig { tissues: 4, ..c.clone() },
        EsdConfig { fodf_degree: 20, nside_in: 2, channels: vec![4], ..c.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    assert_eq!(c.hash(), EsdConfig::default().hash());
    assert_ne!(c.hash(), EsdConfig { seed: 1, ..c.clone() }.hash());
}

#[test]
fn default_three_tissue_model_shapes() {
    let ds = dataset(&[1000.0, 2000.0, 3000.0], 16, 3, 4, f64::INFINITY);
    let cfg = EsdConfig {
        tissues: 3,
        ..EsdConfig::default()
    };
    let model = EsdModel::new(cfg, &[1000.0, 2000.0, 3000.0], &ds.responses, CsdConfig::default()).unwrap();
    assert_eq!(model.net().activation(), HeadActivation::Softplus);
    let inputs = model.inputs(&ds.train).unwrap();
    let out = model.outputs(&inputs).unwrap();
    assert_eq!(out.shape(), &[ds.train.n_voxels(), 3, 768]);
    let field = model.infer(&ds.train).unwrap();
    assert_eq!(field.n_voxels(), ds.train.n_voxels());
    assert_eq!(field.wm().basis.len(), 231);
    assert_eq!(field.parts().len(), 3);
}

#[test]
fn heads_constant_spike_and_round_trip() {
    let grid = SphericalGrid::new(8).unwrap();
    let heads = Heads::new(&grid, 20).unwrap();
    let n = grid.len();
    let mut o = vec![0.0; 3 * n];
    o[..n].iter_mut().for_each(|v| *v = 0.7);
    o[n + 101] = 2.5;
    o[2 * n + 5] = 0.25;
    let field = heads.to_fodf(&Tensor::new(vec![1, 3, n], o).unwrap(), &Tissue::ALL).unwrap();
    let wm = field.wm().row(0);
    assert!((wm[0] - 0.7 * (4.0 * std::f64::consts::PI).sqrt()).abs() < 1e-10);
    assert!(wm[1..].iter().all(|c| c.abs() < 1e-10));
    assert_eq!(field.tissue(Tissue::Gm).unwrap().row(0), &[2.5]);
    assert_eq!(field.tissue(Tissue::Csf).unwrap().row(0), &[0.25]);

    let basis = ShBasis::new(20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c: Vec<f64> = (0..basis.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vals: Vec<f64> = grid
        .vertices()
        .iter()
        .map(|p| basis.degrees().zip(&c).map(|((l, m), ci)| ci * eval_sh(l, m, p).unwrap()).sum())
        .collect();
    let field = heads.to_fodf(&Tensor::new(vec![1, 1, n], vals).unwrap(), &[Tissue::Wm]).unwrap();
    for (a, b) in field.wm().row(0).iter().zip(&c) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn zero_fodf_and_perfect_reconstruction_give_zero_loss() {
    let ds = dataset(&[3000.0], 16, 1, 4, f64::INFINITY);
    let model = EsdModel::new(toy_config(1), &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    let prep = model.prepare(&ds.train).unwrap();
    let v = prep.n_voxels();
    let mut tape = Tape::new();
    let out = tape.constant(Tensor::zeros(vec![v, 1, 48]));
    let zero_targets = vec![0.0; prep.targets().len()];
    let (total, terms) = model.loss_on_tape(&mut tape, out, &zero_targets, &prep.forward_t).unwrap();
    assert_eq!(tape.value(total).item(), 0.0);
    for t in terms {
        assert_eq!(tape.value(t).item(), 0.0);
    }
}

#[test]
fn cauchy_probe_is_ln2() {
    let sigma = 1e-4;
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::new(vec![1], vec![sigma * 2f64.sqrt()]).unwrap());
    let c = tape.cauchy_sum(f, sigma).unwrap();
    assert!((tape.value(c).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

/// Loss of the model on `prep` in train mode as a function of its parameters.
fn train_mode_loss(model: &EsdModel, prep: &Prepared) -> (f64, Vec<Vec<f64>>) {
    let n = model.grid().len();
    let c_in = model.net().in_channels();
    let mut tape = Tape::new();
    let p = model.net().param_vars(&mut tape, true);
    let x = tape.constant(Tensor::new(vec![prep.n_voxels(), c_in, n], prep.inputs().to_vec()).unwrap());
    let mut bn = model.net().bn_stats().to_vec();
    let out = model.net().forward(&mut tape, x, &p, &mut bn, true).unwrap();
    let (total, _) = model.loss_on_tape(&mut tape, out, prep.targets(), &prep.forward_t).unwrap();
    tape.backward(total).unwrap();
    let grads = p.iter().map(|v| tape.grad(*v).unwrap().to_vec()).collect();
    (tape.value(total).item(), grads)
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for tissues in [1, 3] {
        let shells: Vec<f64> = if tissues == 1 { vec![3000.0] } else { vec![1000.0, 2000.0, 3000.0] };
        let ds = dataset(&shells, 16, tissues, 6, 30.0);
        let mut model = EsdModel::new(toy_config(tissues), &shells, &ds.responses, CsdConfig::default()).unwrap();
        let prep = model.prepare(&ds.train.select(&[0, 1, 2, 3])).unwrap();
        let (_, grads) = train_mode_loss(&model, &prep);
        let scale = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..grads.len() {
            for j in (0..grads[i].len()).step_by(3) {
                let orig = model.net().params().get(i).data()[j];
                model.net_mut().params_mut().get_mut(i).data_mut()[j] = orig + h;
                let (lp, _) = train_mode_loss(&model, &prep);
                model.net_mut().params_mut().get_mut(i).data_mut()[j] = orig - h;
                let (lm, _) = train_mode_loss(&model, &prep);
                model.net_mut().params_mut().get_mut(i).data_mut()[j] = orig;
                let num = (lp - lm) / (2.0 * h);
                let a = grads[i][j];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3 * scale));
            }
        }
        assert!(worst < 1e-4, "tissues={tissues}: relative error {worst}");
    }
}

#[test]
fn model_is_quarter_turn_equivariant_in_eval_mode() {
    let ds = dataset(&[3000.0], 32, 1, 3, 30.0);
    let cfg = EsdConfig {
        channels: vec![4, 8, 8],
        ..EsdConfig::default()
    };
    let model = EsdModel::new(cfg, &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    let x = model.inputs(&ds.train).unwrap();
    let y = model.outputs(&x).unwrap();
    let n = model.grid().len();
    for k in 1..4u8 {
        let perm = model.grid().z_rotation_permutation(k).unwrap();
        let permute = |d: &[f64]| -> Vec<f64> {
            d.chunks(n).flat_map(|row| perm.iter().map(|&p| row[p]).collect::<Vec<_>>()).collect()
        };
        let yp = model.outputs(&permute(&x)).unwrap();
        let want = permute(y.data());
        let diff = yp.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "k={k}: {diff}");
    }
}

#[test]
fn inference_is_deterministic_and_checks_shells() {
    let ds = dataset(&[3000.0], 32, 1, 5, 30.0);
    let model = EsdModel::new(toy_config(1), &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    let a = model.infer(&ds.train).unwrap();
    let b = model.infer(&ds.train).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_voxels(), ds.train.n_voxels());
    let other = dataset(&[1000.0], 32, 1, 5, 30.0);
    assert!(matches!(model.infer(&other.train), Err(Error::InvalidArgument(_))));
}

#[test]
fn csd_input_channel_is_appended() {
    let ds = dataset(&[3000.0], 64, 1, 3, f64::INFINITY);
    let cfg = EsdConfig {
        use_csd_input: true,
        ..toy_config(1)
    };
    let model = EsdModel::new(cfg, &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    assert_eq!(model.net().in_channels(), 2);
    let x = model.inputs(&ds.train).unwrap();
    let csd = model.csd_channel(&ds.train).unwrap();
    for v in 0..ds.train.n_voxels() {
        assert_eq!(&x[(2 * v + 1) * 48..(2 * v + 2) * 48], &csd[v * 48..(v + 1) * 48]);
    }
}

#[test]
fn training_log_terms_add_up_and_repeat() {
    let ds = dataset(&[3000.0], 32, 1, 40, 30.0);
    let cfg = EsdConfig {
        max_epochs: 3,
        batch_size: 8,
        ..toy_config(1)
    };
    let run = || {
        let mut model = EsdModel::new(cfg.clone(), &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
        let report = train(&mut model, &ds.train, &ds.val).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1.log, r2.log);
    assert_eq!(m1.net().params(), m2.net().params());
    assert_eq!(r1.log.len(), 3);
    for rec in &r1.log {
        for t in [rec.train, rec.val] {
            assert!((t.total - (t.reconstruction + t.sparsity + t.nonneg)).abs() < 1e-10);
            assert!(t.reconstruction >= 0.0 && t.sparsity >= 0.0 && t.nonneg >= 0.0);
        }
    }
    let best = r1.log.iter().map(|r| r.val.total).fold(f64::INFINITY, f64::min);
    assert_eq!(r1.best_val_loss, best);
    assert_eq!(m1.prepare(&ds.val).and_then(|p| m1.evaluate_loss(&p)).unwrap().total, best);

    let ck = m1.checkpoint(r1.best_epoch, r1.best_val_loss, r1.adam.clone());
    let restored = EsdModel::from_checkpoint(&ck).unwrap();
    assert_eq!(restored.infer(&ds.test).unwrap(), m1.infer(&ds.test).unwrap());
    let mut bad = ck.clone();
    bad.config.seed += 1;
    assert!(EsdModel::from_checkpoint(&bad).is_err());
}

#[test]
fn zero_lambda_removes_sparsity_term() {
    let ds = dataset(&[3000.0], 32, 1, 20, 30.0);
    let cfg = EsdConfig {
        max_epochs: 1,
        lambda_sparsity: 0.0,
        ..toy_config(1)
    };
    let mut model = EsdModel::new(cfg, &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    let r = train(&mut model, &ds.train, &ds.val).unwrap();
    assert_eq!(r.log[0].train.sparsity, 0.0);
    assert_eq!(r.log[0].val.sparsity, 0.0);
    assert_eq!(r.log[0].val.total, r.log[0].val.reconstruction + r.log[0].val.nonneg);
}

#[test]
fn non_finite_loss_names_the_term() {
    let ds = dataset(&[3000.0], 32, 1, 20, 30.0);
    let mut signals = ds.train.signals().to_vec();
    let n = ds.train.table().n_samples();
    signals[n + 3] = f64::NAN;
    let poisoned = VoxelBatch::new(ds.train.table().clone(), signals, None).unwrap();
    let cfg = EsdConfig {
        max_epochs: 1,
        ..toy_config(1)
    };
    let mut model = EsdModel::new(cfg, &[3000.0], &ds.responses, CsdConfig::default()).unwrap();
    match train(&mut model, &poisoned, &ds.val) {
        Err(Error::Numerical(m)) => assert!(m.contains("reconstruction"), "{m}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
}
