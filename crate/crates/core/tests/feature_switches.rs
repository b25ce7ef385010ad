use pierce_core::features::FeatureConfig;
use pierce_core::graph::{build_snapshots, GraphContext};
use pierce_core::qc::{label_features, QcConfig};
use pierce_core::synth::{ScenarioConfig, World};

#[test]
fn switches_zero_only_their_columns() {
    let cfg = ScenarioConfig { steps: 48, patch_model: None, ..ScenarioConfig::default() };
    let world = World::new(&cfg).unwrap();
    let rows = world.features(&FeatureConfig::default()).unwrap();
    let pairs = vec![(cfg.stations[0].id.to_string(), cfg.stations[1].id.to_string())];
    let labels = label_features(&rows, &pairs, &QcConfig::default());
    let mut ctx = GraphContext::new(&cfg.stations, &world.tracks);
    let on = build_snapshots(&ctx, world.start(), world.end(), &rows, &labels, &world.indices).unwrap();
    ctx.day_of_year = false;
    ctx.space_weather = false;
    let off = build_snapshots(&ctx, world.start(), world.end(), &rows, &labels, &world.indices).unwrap();
    assert_eq!(on.len(), off.len());
    let mut observed = 0;
    for (a, b) in on.iter().zip(&off) {
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.edge_feats, b.edge_feats);
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            assert_eq!(x.label, y.label);
            assert_eq!(&x.x_eph[..5], &y.x_eph[..5]);
            assert_eq!(&x.x_eph[7..], &y.x_eph[7..]);
            assert_eq!(y.x_eph[5..7], [0.0, 0.0]);
            assert!(x.x_eph[5] != 0.0 || x.x_eph[6] != 0.0);
            match (&x.x_obs, &y.x_obs) {
                (Some(p), Some(q)) => {
                    observed += 1;
                    assert_eq!(&p[..3], &q[..3]);
                    assert_eq!(q[3..], [0.0, 0.0]);
                    assert!(p[4] > 0.0);
                }
                (None, None) => {}
                _ => panic!("presence changed"),
            }
        }
    }
    assert!(observed > 0);
}
