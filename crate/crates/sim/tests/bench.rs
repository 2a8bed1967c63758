use ros_sim::bench::{self, fit_through_origin, CrossDc, Shape};
use ros_transfer::sim::{as_secs, secs, transfer_time};

fn small() -> Shape {
    Shape {
        entries: 100,
        entry_bytes: 1_000_000,
        rate: 1_000_000_000,
    }
}

#[test]
fn pipelined_fanout_is_linear() {
    let shape = small();
    let pts: Vec<(f64, f64)> = (1..=6)
        .map(|n| (n as f64, as_secs(bench::fanout(shape, n, true).unwrap().total_stall())))
        .collect();
    let (c, r2) = fit_through_origin(&pts);
    assert!(r2 >= 0.99, "r2 {r2}");
    assert!((c - as_secs(shape.shard_time())).abs() / c < 0.1);
    let r = bench::fanout(shape, 6, true).unwrap();
    for (k, row) in r.foreground().enumerate() {
        // Each hop of the chain lags its source by one unit.
        let ideal = shape.shard_time() + k as u64 * shape.unit_time();
        assert_eq!(row.stall(), ideal, "{}", row.actor);
    }
}

#[test]
fn direct_fanout_is_quadratic() {
    let shape = small();
    for n in 1..=6u64 {
        let r = bench::fanout(shape, n as usize, false).unwrap();
        assert_eq!(r.total_stall(), shape.shard_time() * n * (n + 1) / 2);
    }
}

#[test]
fn source_crash_costs_timeout_plus_suffix() {
    let shape = small();
    let t = shape.shard_time();
    for f in [0.1, 0.5, 0.9] {
        let at = as_secs(t) * f;
        let r = bench::failure(shape, at).unwrap();
        let row = r.row("rollout").unwrap();
        assert_eq!(row.sources, ["source-a", "source-b"]);
        let extra = row.stall() - t;
        assert_eq!(extra, bench::failure_extra_delay(shape, at, 4.0));
    }
    let late = bench::failure(shape, 2.0 * as_secs(t)).unwrap();
    assert_eq!(late.row("rollout").unwrap().stall(), t);
}

#[test]
fn crash_mid_unit_retransfers_the_partial_unit() {
    let shape = small();
    let at = 0.0305;
    let extra = bench::failure(shape, at).unwrap().row("rollout").unwrap().stall() - shape.shard_time();
    assert_eq!(extra, secs(4.0) + shape.unit_time() / 2);
    assert_eq!(extra, bench::failure_extra_delay(shape, at, 4.0));
}

#[test]
fn crossdc_smart_crosses_once() {
    let shape = small();
    let n = 4;
    let base = bench::crossdc(shape, n, CrossDc::BASELINE).unwrap();
    let smart = bench::crossdc(shape, n, CrossDc::SMART).unwrap();
    assert_eq!(base.cross_dc_bytes(), n as u64 * shape.shard_bytes());
    assert_eq!(smart.cross_dc_bytes(), shape.shard_bytes());
    assert_eq!(smart.cross_dc_fills(), 1);
    assert_eq!(base.cross_dc_fills(), n);

    let local = transfer_time(shape.shard_bytes(), 10_000_000_000);
    assert_eq!(smart.row("rollout-0").unwrap().stall(), local);
    for i in 1..n {
        let s = smart.row(&bench::rollout(i)).unwrap().stall();
        assert!(s as f64 <= 1.1 * shape.shard_time() as f64, "rollout-{i} stalled {s}");
    }
}

#[test]
fn reports_are_deterministic() {
    let shape = small();
    let runs: Vec<String> = (0..3)
        .map(|_| {
            let a = bench::fanout(shape, 3, true).unwrap();
            let b = bench::crossdc(shape, 3, CrossDc::SMART).unwrap();
            format!("{}{}{}{}", a.csv(), a.run.trace, b.csv(), b.run.trace)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[1], runs[2]);
    assert!(runs[0].lines().next().unwrap().starts_with("scenario,actor,"));
}
