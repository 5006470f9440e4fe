use regime_lq::cli::builtin;
use regime_lq::problem::{load_file, load_spec, render_spec, save_file};
use regime_lq::Error;
use serde_json::json;

type Edit = Box<dyn Fn(&mut serde_json::Value)>;

const SHIPPED: [&str; 4] = ["modulated-homogeneous", "modulated-drift", "anti-convex", "scalar-classical"];

fn path(name: &str) -> String {
    format!("{}/problems/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn shipped_files_match_builtins() {
    for name in SHIPPED {
        let spec = load_file(path(name)).unwrap();
        assert_eq!(spec, builtin(name).unwrap(), "{name}");
    }
}

#[test]
fn render_load_and_save_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    for name in SHIPPED {
        let spec = builtin(name).unwrap();
        assert_eq!(load_spec(&render_spec(&spec)).unwrap(), spec, "{name}");
        let file = tmp.path().join(format!("{name}.json"));
        save_file(&spec, &file).unwrap();
        assert_eq!(load_file(&file).unwrap(), spec, "{name} via disk");
    }
}

#[test]
fn malformed_documents_name_the_field() {
    let good: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path("modulated-drift")).unwrap()).unwrap();
    let cases: Vec<(&str, Edit)> = vec![
        ("dims", Box::new(|d| d["dims"]["n"] = json!(0))),
        (
            "horizon",
            Box::new(|d| d.as_object_mut().unwrap().remove("horizon").map(|_| ()).unwrap()),
        ),
        ("generator", Box::new(|d| d["generator"]["matrix"] = json!([[-1, 2], [1, -1]]))),
        (
            "weights.R",
            Box::new(|d| d["weights"].as_object_mut().unwrap().remove("R").map(|_| ()).unwrap()),
        ),
    ];
    for (want, edit) in cases {
        let mut doc = good.clone();
        edit(&mut doc);
        match load_spec(&doc) {
            Err(Error::Load { field, .. }) => assert!(field.starts_with(want), "{want}: got {field}"),
            Err(other) => assert!(other.to_string().contains(want), "{want}: {other}"),
            Ok(_) => panic!("{want}: accepted"),
        }
    }
}

#[test]
fn missing_file_is_an_error() {
    assert!(load_file("/nonexistent/problem.json").is_err());
}
