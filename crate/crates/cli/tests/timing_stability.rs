use mt3d::evalbench::measure_steps_per_sec;
use mt3d::weights::ModelWeights;
use mt3d::Config;

// Two back-to-back median measurements of the same workload.
#[test]
fn repeated_bench_medians_within_twenty_percent() {
    let cfg = Config::default();
    let w = ModelWeights::init(&cfg, 0).unwrap();
    let a = measure_steps_per_sec(&cfg, &w, 2048, 9).unwrap();
    let b = measure_steps_per_sec(&cfg, &w, 2048, 9).unwrap();
    let ratio = a.max(b) / a.min(b);
    println!("steps/s {a:.2} then {b:.2}, ratio {ratio:.3}");
    assert!(ratio < 1.2, "ratio {ratio}");
}
