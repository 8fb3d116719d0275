use drmea::svg::parse_bounds;
use drmea_web::{adaptation_run_json, error_index_study_json, inter_class_geometry_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).expect("valid JSON")
}

#[test]
fn error_index_study_covers_every_dimension() {
    let v = parse(&error_index_study_json(32, 16, 5, 3).unwrap());
    let curve = v["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 15);
    assert_eq!(curve[0][0], 1);
    let rec = v["recommended"].as_u64().unwrap();
    assert!((1..=15).contains(&rec));
    let b = parse_bounds(v["svg"].as_str().unwrap()).unwrap();
    assert_eq!(b.x_max, 15.0);
    assert_eq!(
        error_index_study_json(32, 16, 5, 3).unwrap(),
        error_index_study_json(32, 16, 5, 3).unwrap()
    );
}

#[test]
fn three_classes_spread_to_the_optimum() {
    let v = parse(&inter_class_geometry_json(3, 3000, 0.05, 1).unwrap());
    assert!((v["final_loss"].as_f64().unwrap() + 0.5).abs() < 1e-3);
    assert_eq!(v["optimum"].as_f64().unwrap(), -0.5);
    let dirs: Vec<[f64; 2]> = serde_json::from_value(v["directions"].clone()).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            let cos = dirs[i][0] * dirs[j][0] + dirs[i][1] * dirs[j][1];
            assert!((cos + 0.5).abs() < 1e-2, "cos {cos}");
        }
    }
    assert_eq!(v["losses"].as_array().unwrap().len(), 3000);
}

#[test]
fn out_of_range_inputs_are_rejected() {
    assert!(inter_class_geometry_json(1, 10, 0.1, 0)
        .unwrap_err()
        .contains("classes"));
    assert!(error_index_study_json(32, 2, 5, 0).is_err());
    assert!(adaptation_run_json(f64::NAN, 5, 0).is_err());
    assert!(adaptation_run_json(45.0, 0, 0).is_err());
}

#[test]
fn adaptation_run_returns_both_curves() {
    let v = parse(&adaptation_run_json(45.0, 3, 2).unwrap());
    for key in ["full", "source_only"] {
        let accs = v[key].as_array().unwrap();
        assert_eq!(accs.len(), 3);
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(&a.as_f64().unwrap())));
    }
    assert!(v["svg"].as_str().unwrap().contains("source only"));
}
