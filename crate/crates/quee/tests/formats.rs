use quee::config::ExperimentConfig;
use quee::model_file::{topology_hash, ModelBundle};
use quee::pipeline::load_inputs;
use quee::records::{read_dataset, write_dataset};
use quee_core::harness::train_models;
use quee_core::path_space::NetworkTopology;

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    cfg.data.num_samples = 600;
    cfg.model.k = 5;
    cfg.model.max_epochs = 3;
    cfg
}

#[test]
fn records_round_trip_bit_exact() {
    let cfg = small_config(3);
    let inputs = load_inputs(&cfg, None).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&inputs.dataset, &inputs.path_set, &mut bytes).unwrap();
    let back = read_dataset(bytes.as_slice(), &inputs.pipeline.topology, &inputs.path_set).unwrap();
    assert_eq!(back, inputs.dataset);
    for (a, b) in back.test.iter().zip(&inputs.dataset.test) {
        for (p, v) in &a.probs {
            let w = &b.probs[p];
            assert!(v.iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    let mut again = Vec::new();
    write_dataset(&back, &inputs.path_set, &mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn records_from_disk_match_generated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(4);
    let inputs = load_inputs(&cfg, None).unwrap();
    let file = dir.path().join("r.ndjson");
    quee::records::save_dataset(&inputs.dataset, &inputs.path_set, &file).unwrap();
    let loaded = load_inputs(&cfg, Some(&file)).unwrap();
    assert_eq!(loaded.dataset, inputs.dataset);
}

#[test]
fn model_round_trip_and_topology_check() {
    let cfg = small_config(5);
    let inputs = load_inputs(&cfg, None).unwrap();
    let models = train_models(&inputs.dataset, &inputs.path_set, &inputs.pipeline).unwrap();
    let bundle = ModelBundle {
        path_set: inputs.path_set.clone(),
        models,
    };
    let topo = &inputs.pipeline.topology;
    let mut bytes = Vec::new();
    bundle.write(topo, &mut bytes).unwrap();
    let back = ModelBundle::read(bytes.as_slice(), topo).unwrap();
    assert_eq!(back, bundle);

    let other = NetworkTopology::new(vec![1.0, 2.0, 1.0], vec![4, 8]).unwrap();
    assert_ne!(topology_hash(&other), topology_hash(topo));
    let err = ModelBundle::read(bytes.as_slice(), &other).unwrap_err();
    assert!(format!("{err:#}").contains("different topology"), "{err:#}");
}

#[test]
fn model_with_truncated_params_rejected() {
    let cfg = small_config(6);
    let inputs = load_inputs(&cfg, None).unwrap();
    let models = train_models(&inputs.dataset, &inputs.path_set, &inputs.pipeline).unwrap();
    let bundle = ModelBundle {
        path_set: inputs.path_set.clone(),
        models,
    };
    let topo = &inputs.pipeline.topology;
    let mut bytes = Vec::new();
    bundle.write(topo, &mut bytes).unwrap();
    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    v["gates"][0]["params"].as_array_mut().unwrap().pop();
    let text = serde_json::to_vec(&v).unwrap();
    let err = ModelBundle::read(text.as_slice(), topo).unwrap_err();
    assert!(format!("{err:#}").contains("parameters"), "{err:#}");
}

#[test]
fn config_records_resolve_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(7);
    let inputs = load_inputs(&cfg, None).unwrap();
    quee::records::save_dataset(&inputs.dataset, &inputs.path_set, &dir.path().join("data.ndjson")).unwrap();
    let toml = "seed = 7\n[data]\nrecords = \"data.ndjson\"\n[model]\nk = 5\n";
    std::fs::write(dir.path().join("exp.toml"), toml).unwrap();
    let loaded = ExperimentConfig::load(&dir.path().join("exp.toml")).unwrap();
    let again = load_inputs(&loaded, None).unwrap();
    assert_eq!(again.dataset, inputs.dataset);
}
