use fmu_core::training::*;

#[test]
fn dbg_repeated_batch() {
    let mut cfg = ExperimentConfig::ablation_profile(7);
    cfg.train.epochs = 6;
    cfg.train.steps_per_epoch = 1;
    cfg.train.n_train = 1;
    cfg.train.batch = 1;
    let mut losses = Vec::new();
    let mut hook = |s: &TrainState<f32>| { losses.push(s.last_loss); Ok(()) };
    let st = train_phase1_with_hook::<f32>(&cfg, Some(&mut hook)).unwrap();
    println!("losses: {:?}", losses);
    println!("out.w max {:.3e}", st.store.value("den.0.out.w").unwrap().max_abs());
    println!("rho0 {}", st.store.value("rho.0").unwrap().item());
}
