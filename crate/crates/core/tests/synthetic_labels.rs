use std::collections::BTreeMap;
use std::sync::Arc;

use pierce_core::features::FeatureConfig;
use pierce_core::geo::TimeStamp;
use pierce_core::qc::{label_features, LabelStats, NodeLabel, QcConfig};
use pierce_core::synth::{ScenarioConfig, World};

fn pairs(cfg: &ScenarioConfig) -> Vec<(String, String)> {
    vec![(cfg.stations[0].id.to_string(), cfg.stations[1].id.to_string())]
}

#[test]
fn artifact_free_labels_match_truth_on_event_epochs() {
    let cfg = ScenarioConfig {
        steps: 2016,
        artifacts_per_station_day: 0.0,
        gaps_per_station_day: 0.0,
        ..ScenarioConfig::default()
    };
    let world = World::new(&cfg).unwrap();
    let rows = world.features(&FeatureConfig::default()).unwrap();
    let labels = label_features(&rows, &pairs(&cfg), &QcConfig::default());
    let by_key: BTreeMap<(TimeStamp, Arc<str>, Arc<str>), NodeLabel> = labels
        .iter()
        .map(|r| ((r.t_s, r.station.clone(), r.sat.clone()), r.label))
        .collect();
    let (mut events, mut agree) = (0usize, 0usize);
    for t in world.ground_truth().iter().filter(|r| r.label == 1) {
        if let Some(l) = by_key.get(&(t.t_s, t.station.clone(), t.sat.clone())) {
            events += 1;
            agree += (*l == NodeLabel::Confirmed) as usize;
        }
    }
    let stats = LabelStats::from_rows(&labels);
    eprintln!("truth event epochs with data {events}, confirmed {agree}, stats {stats:?}");
    assert!(events > 500);
    assert!(agree as f64 / events as f64 >= 0.95);
    assert_eq!(stats.unverified, 0);
}

#[test]
fn single_station_artifacts_are_invalid() {
    let cfg = ScenarioConfig {
        steps: 2016,
        patch_model: None,
        artifacts_per_station_day: 3.0,
        gaps_per_station_day: 0.0,
        ..ScenarioConfig::default()
    };
    let world = World::new(&cfg).unwrap();
    let rows = world.features(&FeatureConfig::default()).unwrap();
    let labels = label_features(&rows, &pairs(&cfg), &QcConfig::default());
    let stats = LabelStats::from_rows(&labels);
    eprintln!("artifact stats {stats:?}");
    assert_eq!(stats.confirmed, 0);
    assert_eq!(stats.unverified, 0);
    assert!(stats.invalid > 0);
}
