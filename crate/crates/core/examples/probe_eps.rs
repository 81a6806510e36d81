fn main() {
    let cfg = rca::config::ExperimentConfig::default();
    let (src, _) = cfg.build_datasets().unwrap();
    let mnn = rca::data::median_nn_distance(&src.features);
    println!("median NN distance: {mnn}, auto eps: {}", 0.5 * mnn);
}
