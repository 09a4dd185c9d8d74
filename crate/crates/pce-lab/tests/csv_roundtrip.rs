use pce_lab::engine::solve_pce;
use pce_lab::limit::{
    read_study_csv, run_study, write_study_csv, LimitSpec, StudyConfig, StudyRow,
};
use pce_lab::market::MarketScenario;
use pce_lab::output::{coefficient_rows, write_coefficients};
use pce_lab::sim::{export_csv, paths_header, simulate, SimConfig};

fn field(v: &str) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.parse().unwrap())
    }
}

#[test]
fn paths_csv_reproduces_every_stored_value() {
    let sol = solve_pce(&MarketScenario::two_signal_example()).unwrap();
    let cfg = SimConfig {
        seed: 3,
        n_paths: 4,
        grid: 30,
        threads: Some(1),
    };
    let samples = simulate(&sol, &cfg).unwrap();
    let mut buf = Vec::new();
    export_csv(&samples, 1, 3, &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, paths_header(1, 3));
    let records: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let rows: Vec<_> = samples
        .iter()
        .flat_map(|s| s.rows.iter().map(move |r| (s.path_id, r)))
        .collect();
    assert_eq!(records.len(), rows.len());
    for (rec, (pid, row)) in records.iter().zip(rows) {
        assert_eq!(rec[0].parse::<usize>().unwrap(), pid);
        assert_eq!(rec[1].parse::<usize>().unwrap(), row.stage);
        assert_eq!(field(&rec[2]), Some(row.t));
        assert_eq!(field(&rec[3]), Some(row.x[0]));
        assert_eq!(field(&rec[4]), Some(row.price[0]));
        assert_eq!(field(&rec[5]), Some(row.mpr[0]));
        for j in 0..3 {
            assert_eq!(field(&rec[6 + j]), row.positions[j].as_ref().map(|p| p[0]));
        }
        assert_eq!(field(&rec[9]), Some(row.residual));
    }
}

#[test]
fn study_csv_round_trips() {
    let cfg = StudyConfig {
        samples: 50,
        energy_samples: 20,
        grid_level: 8,
        mc_levels: vec![4, 6],
        threads: Some(1),
        ..StudyConfig::default()
    };
    let mut spec = LimitSpec::reference();
    spec.n_range = vec![4, 6];
    let rows = run_study(&spec, &cfg).unwrap().rows();
    let mut buf = Vec::new();
    write_study_csv(&rows, &mut buf).unwrap();
    assert!(buf.starts_with(b"spec_id,N,t,metric,value\n"));
    assert_eq!(read_study_csv(buf.as_slice()).unwrap(), rows);
    let metrics: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.metric.as_str()).collect();
    for m in [
        "f_sup_error",
        "j_l2_error",
        "theta_median_error",
        "ell_mc",
        "ell_closed",
        "drift_energy_mc",
        "drift_energy_limit",
    ] {
        assert!(metrics.contains(m), "{m}");
    }
}

#[test]
fn study_csv_keeps_non_finite_values() {
    let rows = vec![
        StudyRow {
            spec_id: "s".into(),
            n: 0,
            t: 1.0,
            metric: "q".into(),
            value: f64::INFINITY,
        },
        StudyRow {
            spec_id: "s".into(),
            n: 0,
            t: 1.0,
            metric: "q_finite".into(),
            value: f64::NAN,
        },
    ];
    let mut buf = Vec::new();
    write_study_csv(&rows, &mut buf).unwrap();
    let back = read_study_csv(buf.as_slice()).unwrap();
    assert_eq!(back[0].value, f64::INFINITY);
    assert!(back[1].value.is_nan());
}

#[test]
fn coefficient_csv_round_trips() {
    let sol = solve_pce(&MarketScenario::two_signal_example()).unwrap();
    let rows = coefficient_rows(&sol, 5).unwrap();
    let mut buf = Vec::new();
    write_coefficients(&rows, &mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    for (rec, row) in rdr.records().map(Result::unwrap).zip(&rows) {
        assert_eq!(rec[0].parse::<usize>().unwrap(), row.stage);
        assert_eq!(rec[1].parse::<f64>().unwrap(), row.t);
        assert_eq!(&rec[2], row.block);
        assert_eq!(rec[5].parse::<f64>().unwrap(), row.value);
    }
}
