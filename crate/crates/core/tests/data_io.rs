use std::fs;

use tivat_core::config::{load_splits, DataConfig};
use tivat_core::data::{load_csv, mean_std, synth_leadlag, LeadLagSpec, SeriesFrame};
use tivat_core::Error;

fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn csv_round_trip_is_exact() {
    let frame = synth_leadlag(&LeadLagSpec {
        variates: 3,
        len: 50,
        lag: 2,
        coupling: 0.7,
        noise_std: 0.3,
        seed: 11,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    frame.write_csv(&path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back, frame);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("date,"));
}

#[test]
fn csv_reports_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "a.csv", "date,x,y\n0,1.0,2.0\n1,3.0,oops\n");
    match load_csv(&p) {
        Err(Error::ParseCell { row, column, value }) => {
            assert_eq!((row, column, value.as_str()), (2, 2, "oops"));
        }
        other => panic!("{other:?}"),
    }
    let p = write(&dir, "b.csv", "date,x\n0,\n");
    assert!(matches!(load_csv(&p), Err(Error::ParseCell { .. })));
    let p = write(&dir, "c.csv", "date,x\n0,NaN\n");
    assert!(matches!(load_csv(&p), Err(Error::ParseCell { .. })));
    let p = write(&dir, "d.csv", "date\n0\n");
    assert!(load_csv(&p).is_err());
    assert!(load_csv(&dir.path().join("missing.csv")).is_err());
}

#[test]
fn csv_keeps_column_order_and_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(&dir, "e.csv", "when,b,a\n2020-01-01 00:00,1,2\n2020-01-01 01:00,3,4\n");
    let f = load_csv(&p).unwrap();
    assert_eq!(f.variate_names(), ["b", "a"]);
    assert_eq!(f.timestamps()[1], "2020-01-01 01:00");
    assert_eq!(f.column(1), vec![2.0, 4.0]);
}

#[test]
fn frame_rejects_ragged_values() {
    assert!(SeriesFrame::new(vec!["a".into(), "b".into()], vec!["0".into()], vec![1.0]).is_err());
}

fn xcorr(a: &[f64], b: &[f64], shift: usize) -> f64 {
    let n = a.len() - shift;
    let (ma, sa) = mean_std(&a[..n]);
    let (mb, sb) = mean_std(&b[shift..]);
    (0..n).map(|t| (a[t] - ma) * (b[t + shift] - mb)).sum::<f64>() / (n as f64 * sa * sb)
}

#[test]
fn synthetic_driver_leads_by_the_lag() {
    let lag = 6;
    let f = synth_leadlag(&LeadLagSpec {
        variates: 4,
        len: 3000,
        lag,
        coupling: 0.8,
        noise_std: 0.2,
        seed: 3,
    })
    .unwrap();
    let driver = f.column(0);
    for v in 1..4 {
        let follower = f.column(v);
        let peak = (0..=40)
            .max_by(|&a, &b| xcorr(&driver, &follower, a).total_cmp(&xcorr(&driver, &follower, b)))
            .unwrap();
        assert_eq!(peak, v * lag, "variate {v}");
    }
}

#[test]
fn synthetic_series_is_seeded() {
    let spec = LeadLagSpec {
        variates: 2,
        len: 100,
        lag: 3,
        coupling: 0.5,
        noise_std: 0.1,
        seed: 42,
    };
    assert_eq!(synth_leadlag(&spec).unwrap(), synth_leadlag(&spec).unwrap());
    let other = synth_leadlag(&LeadLagSpec { seed: 43, ..spec }).unwrap();
    assert_ne!(other.values(), synth_leadlag(&spec).unwrap().values());
}

#[test]
fn splits_are_scaled_with_training_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let mut body = String::from("date,x\n");
    for t in 0..100 {
        body.push_str(&format!("{t},{}\n", t as f64));
    }
    let path = write(&dir, "ramp.csv", &body);
    let data = DataConfig {
        csv_path: Some(path),
        split: Some([60, 20, 20]),
        ..DataConfig::default()
    };
    let s = load_splits(&data, 4, 2).unwrap();
    assert_eq!(s.train.len(), 60 - 6 + 1);
    assert_eq!(s.val.len(), 20 - 6 + 1);
    assert_eq!(s.test.len(), 20 - 6 + 1);
    let (m, sd) = mean_std(&(0..60).map(|t| t as f64).collect::<Vec<_>>());
    let first_val = s.val.frame().value(0, 0);
    assert!((first_val - (60.0 - m) / sd).abs() < 1e-12);

    let raw = DataConfig { standardize: false, ..data.clone() };
    let s = load_splits(&raw, 4, 2).unwrap();
    assert_eq!(s.test.frame().value(0, 0), 80.0);

    let too_big = DataConfig { split: Some([90, 20, 20]), ..data };
    assert!(load_splits(&too_big, 4, 2).is_err());
}
