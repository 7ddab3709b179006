//! Small-scale pipeline smoke test: a 12x12 synthetic city through
//! the in-memory end-to-end run.

use deepi2t_core::config::RunConfig;
use deepi2t_core::pipeline::run_synthetic_e2e;
use deepi2t_core::report::method_metrics;

fn small_config() -> RunConfig {
    RunConfig::parse(
        r#"
        [data]
        dataset = "synthetic"

        [synth]
        seed = 11
        cells_wide = 12
        cells_high = 12
        trips = 600
        days = 5
        vehicles = 30

        [model]
        profile = "test"
        image_height = 16
        image_width = 16
        lstm_hidden = 16
        residual_blocks = 1

        [line]
        epochs = 10
        dim = 100

        [train]
        epochs = 10
        batch_size = 16
        learning_rate = 0.02
        patience = 10
        seed = 5
    "#,
    )
    .unwrap()
}

#[test]
fn small_synthetic_end_to_end() {
    let started = std::time::Instant::now();
    let outcome = run_synthetic_e2e(&small_config(), false).unwrap();
    eprintln!("e2e wall time: {:.1}s", started.elapsed().as_secs_f64());

    assert!(outcome.history.len() >= 3);
    assert!(outcome.n_test_queries > 10);

    let aware = method_metrics(&outcome.rows, |r| r.aware).unwrap();
    let lr = method_metrics(&outcome.rows, |r| r.lr).unwrap();
    eprintln!(
        "aware MAPE {:.2}% (n={}), lr MAPE {:.2}%, blind coverage {:.2}",
        aware.mape_pct,
        aware.count,
        lr.mape_pct,
        outcome.blind_coverage()
    );
    for h in &outcome.history {
        eprintln!(
            "epoch {}: loss {:.4} train_mape {:.2}% eval {:.2}% wall {:.1}s",
            h.epoch, h.train_loss, h.train_mape, h.eval_mape, h.wall_s
        );
    }
    assert!(aware.mape_pct.is_finite());
    // training made progress from the first epoch
    assert!(outcome.history.last().unwrap().train_mape < outcome.history[0].train_mape);
}

#[test]
fn model_can_overfit_a_small_set() {
    let mut config = small_config();
    config.synth.as_mut().unwrap().trips = 40;
    config.synth.as_mut().unwrap().days = 2;
    config.train.epochs = 60;
    config.train.patience = 1000;
    config.train.learning_rate = 0.01;
    config.train.batch_size = 8;
    let outcome = run_synthetic_e2e(&config, false).unwrap();
    let first = outcome.history.first().unwrap().train_mape;
    let last = outcome.history.last().unwrap().train_mape;
    eprintln!("overfit probe: train MAPE {first:.2}% -> {last:.2}%");
    for h in outcome.history.iter().step_by(10) {
        eprintln!("  epoch {}: loss {:.5} train_mape {:.2}%", h.epoch, h.train_loss, h.train_mape);
    }
    assert!(last < 15.0, "should overfit a tiny training set, got {last:.2}%");
}
