use pyo3::PyResult;
use qsmkit::{cg, forward_field, metrics, passband_error, read_volume, run_cli, tkd, vsharp, write_volume};

// PyErr formatting needs a live interpreter, so failures are reported without it.
fn ok<T>(r: PyResult<T>) -> T {
    r.ok().expect("binding returned an error")
}

fn ball(n: usize, r: f64, value: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut v = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                v.push(if d2 <= r * r { value } else { 0.0 });
            }
        }
    }
    v
}

#[test]
fn tkd_round_trip_is_passband_exact() {
    let dims = (16, 16, 16);
    let chi = ball(16, 4.0, 0.1);
    let field = ok(forward_field(chi.clone(), dims, (1.0, 1.0, 1.0)));
    let rec = ok(tkd(field, dims, (1.0, 1.0, 1.0), 0.2));
    assert!(ok(passband_error(rec, chi, dims, (1.0, 1.0, 1.0), 0.2)) <= 1e-10);
}

#[test]
fn background_removal_and_cg_run() {
    let dims = (24, 24, 24);
    let m = ball(24, 9.0, 1.0);
    let field = ok(forward_field(ball(24, 3.0, 0.1), dims, (1.0, 1.0, 1.0)));
    let (local, reliable) = ok(vsharp(field, m.clone(), dims, (1.0, 1.0, 1.0), 1, 4, 0.05));
    assert_eq!(local.len(), 24 * 24 * 24);
    assert!(reliable.iter().filter(|&&b| b).count() > 0);
    let (chi, iters, _) = ok(cg(local, m, dims, (1.0, 1.0, 1.0), 1e-2, 20, 1e-6));
    assert_eq!(chi.len(), 24 * 24 * 24);
    assert!(iters >= 1);
}

#[test]
fn metrics_of_identical_volumes() {
    let m = ball(12, 4.0, 1.0);
    let v: Vec<f64> = m.iter().enumerate().map(|(i, w)| w * (i % 7) as f64 * 0.03).collect();
    let (rmse, hfen, ssim) = ok(metrics(v.clone(), v, m, (12, 12, 12), (1.0, 1.0, 1.0)));
    assert_eq!((rmse, hfen), (0.0, 0.0));
    assert!((ssim - 1.0).abs() < 1e-12);
}

#[test]
fn bad_dims_are_rejected() {
    assert!(forward_field(vec![0.0; 10], (2, 2, 2), (1.0, 1.0, 1.0)).is_err());
}

#[test]
fn volume_files_round_trip() {
    let dir = std::env::temp_dir().join(format!("qsmkit-py-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("v.qsmv");
    let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25).collect();
    ok(write_volume(path.to_str().unwrap(), data.clone(), (2, 3, 4), (1.0, 2.0, 3.0)));
    let (back, dims, vs) = ok(read_volume(path.to_str().unwrap()));
    assert_eq!((back, dims, vs), (data, (2, 3, 4), (1.0, 2.0, 3.0)));
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn cli_is_reachable() {
    let (code, out, _) = run_cli(vec!["--version".into()]);
    assert_eq!(code, 0);
    assert!(out.contains("qsmkit"));
}
