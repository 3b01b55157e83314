use std::sync::Arc;
use fmu_core::io;
use fmu_core::metrics::psnr;
use fmu_core::ndtensor::rng::{rand_normal, Rng};
use fmu_core::ndtensor::tape::Tape;
use fmu_core::nnblocks::encode;
use fmu_core::sensing::HsiCube;
use fmu_core::synthdata;
use fmu_core::training::*;

#[test]
fn dbg_prior_value() {
    let ckpt = io::load_ckpt::<f32>(std::path::Path::new("/tmp/tr7f/phase1.fmuckpt")).unwrap();
    let cfg = ExperimentConfig::from_doc(&io::ConfigDoc::parse(&ckpt.config_text).unwrap()).unwrap();
    let state = TrainState::<f32>::from_checkpoint(&ckpt, cfg.train.seed).unwrap();
    let models = Models::from_config(&cfg);
    let sys = build_system::<f32>(&cfg).unwrap();
    let (_, test_specs) = synthdata::make_split(&cfg.scene, cfg.train.n_train, cfg.train.n_test, cfg.train.seed).unwrap();
    let grid = models.token_grid;
    let nc = [grid.0 * grid.1, cfg.encoder.channels];

    for (i, spec) in test_specs.iter().enumerate() {
        let x = synthdata::generate::<f32>(spec).unwrap();
        let mut rng = Rng::new(777).substream(&format!("eval.{i}"));
        let y = sys.simulate(&x, &mut rng).unwrap();
        // (a) oracle encoder prior (sees ground truth)
        let pa = {
            let mut tape = Tape::new();
            let yid = tape.constant(y.tensor().clone());
            let ynid = tape.sensing_pinv(&sys, yid).unwrap();
            let xid = tape.constant(x.tensor().clone());
            let (z, g) = encode(&models.le, &mut tape, &state.store, ynid, xid).unwrap();
            let out = fmu_core::unfolding::fmu_forward(&mut tape, &state.store, &models.unfold, &sys, yid, Some((z, g))).unwrap();
            let xhat = HsiCube::new(tape.value(out).clone()).unwrap();
            psnr(&xhat, &x, 1.0).unwrap().as_db().unwrap()
        };
        // (b) pure-noise prior
        let pb = {
            let mut tape = Tape::new();
            let yid = tape.constant(y.tensor().clone());
            let z = tape.constant(rand_normal::<f32>(&mut rng, &nc));
            let out = fmu_core::unfolding::fmu_forward(&mut tape, &state.store, &models.unfold, &sys, yid, Some((z, grid))).unwrap();
            let xhat = HsiCube::new(tape.value(out).clone()).unwrap();
            psnr(&xhat, &x, 1.0).unwrap().as_db().unwrap()
        };
        // (c) zero prior tokens
        let pc = {
            let mut tape = Tape::new();
            let yid = tape.constant(y.tensor().clone());
            let z = tape.constant(fmu_core::ndtensor::tensor::Tensor::zeros(&nc));
            let out = fmu_core::unfolding::fmu_forward(&mut tape, &state.store, &models.unfold, &sys, yid, Some((z, grid))).unwrap();
            let xhat = HsiCube::new(tape.value(out).clone()).unwrap();
            psnr(&xhat, &x, 1.0).unwrap().as_db().unwrap()
        };
        println!("scene {i}: oracle-prior {pa:.2} dB | noise-prior {pb:.2} dB | zero-prior {pc:.2} dB");
    }
}
