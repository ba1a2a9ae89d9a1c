//! Window-parallel sampling and PDE baselines, sequential against a pool.
//!
//! Without the `parallel` feature both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stepdiff::deeponet::DeepOnetConfig;
use stepdiff::diffusion::{DenoiserConfig, IntegrationMode, TrainRunConfig};
use stepdiff::grid::{sliding_windows, WindowSample};
use stepdiff::par;
use stepdiff::pipeline::{fit, pde_baseline, Model, PipelineConfig};
use stepdiff::synth::Scenario;

fn setup() -> (Model, Vec<WindowSample>) {
    let mut sc = Scenario::default_scenario(0);
    sc.synth.slices = 80;
    let data = sc.generate().unwrap();
    let cfg = PipelineConfig {
        train: TrainRunConfig {
            iterations: 10,
            steps: 20,
            mode: IntegrationMode::from_id("10").unwrap(),
            denoiser: DenoiserConfig { channels: 16, heads: 2, layers: 1, ff: 16, ..DenoiserConfig::default() },
            ..TrainRunConfig::default()
        },
        deeponet: DeepOnetConfig { p: 8, hidden: vec![32], epochs: 1, ..DeepOnetConfig::default() },
        known_pde: sc.synth.pde_params().summary(),
        ..PipelineConfig::default()
    };
    let model = fit(&data.observed, &cfg).unwrap().model;
    let windows = sliding_windows(&data.observed, 12, 12).unwrap().into_iter().step_by(7).take(8).collect();
    (model, windows)
}

fn bench(c: &mut Criterion) {
    let (model, windows) = setup();
    let threads = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    let mut g = c.benchmark_group("sample_windows");
    g.sample_size(10);
    for jobs in [1, threads] {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| model.forecast_windows(&windows, 1, 0, jobs).unwrap())
        });
    }
    g.finish();

    let op = &model.op;
    let hist: Vec<WindowSample> = windows.iter().map(WindowSample::for_forecast).collect();
    let mut g = c.benchmark_group("pde_baseline");
    for jobs in [1, threads] {
        g.bench_with_input(BenchmarkId::from_parameter(jobs), &jobs, |b, &jobs| {
            b.iter(|| par::try_map(jobs, &hist, |_, w| pde_baseline(w, op, model.norm.mean)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
