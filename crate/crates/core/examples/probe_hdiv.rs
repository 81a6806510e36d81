//! Recompute the H-divergence proxy for saved checkpoints against the
//! default datasets.
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = rca::config::ExperimentConfig::default();
    let (src, tgt) = cfg.build_datasets().unwrap();
    for path in &args[1..] {
        let params = rca::networks::ParamSet::load(std::path::Path::new(path)).unwrap();
        let z_s = params.encode(&src.features).unwrap();
        let z_t = params.encode(&tgt.features).unwrap();
        let h = rca::theory::h_divergence_proxy(&z_s, &z_t, 99).unwrap();
        let acc = rca::trainer::evaluate(&params, &tgt, rca::trainer::EvalHead::ClassPredictor).unwrap();
        println!("{path}: h_div={h:.3} acc={acc:.3}");
    }
}
