//! Per-timestep observation graphs over pierce points.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ephemeris::{visible_links, LosLink, SatelliteTrack, Station, DEFAULT_ELEVATION_MASK_DEG};
use crate::error::{Error, Result};
use crate::features::{FeatureRow, MODEL_CADENCE_S};
use crate::geo::{
    cyc_encode, dipole_mag_coords, haversine_km, ipp_from_los, local_solar_time_h,
    lst_angular_sep_deg, shell_radius_km, wrap_lon_deg, MagneticPole, TimeStamp, DAYS_PER_YEAR,
    SHELL_HEIGHT_KM,
};
use crate::qc::{LabelRow, NodeLabel};
use crate::synth::IndexRow;

pub const OBS_DIM: usize = 5;
pub const EPH_DIM: usize = 9;
pub const EDGE_DIM: usize = 7;
pub const ZERO_BASELINE_FLAG: usize = 6;
pub const DEFAULT_K: usize = 4;

/// Station-satellite identity of a node. Never part of any feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub station: Arc<str>,
    pub sat: Arc<str>,
}

impl NodeKey {
    pub fn constellation(&self) -> char {
        self.sat.chars().next().unwrap_or('?')
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IppNode {
    pub key: NodeKey,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub mag_lat_deg: f64,
    pub mag_lon_deg: f64,
    pub lst_h: f64,
    pub elevation_deg: f64,
    /// `[roti, dtec_rate, eff_snr, dst, f107]`, present only when observed.
    pub x_obs: Option<[f64; OBS_DIM]>,
    /// `[lat, lon, mag_lat, mag_lon, elevation, sin doy, cos doy, sin lst, cos lst]`.
    pub x_eph: [f64; EPH_DIM],
    pub label: Option<NodeLabel>,
}

impl IppNode {
    pub fn from_link(link: &LosLink, t: TimeStamp) -> Self {
        let (sd, cd) = cyc_encode(t.day_of_year(), DAYS_PER_YEAR);
        let (sl, cl) = cyc_encode(link.local_solar_time_h, 24.0);
        Self {
            key: NodeKey { station: link.station_id.clone(), sat: link.satellite_id.clone() },
            lat_deg: link.ipp.lat_deg,
            lon_deg: link.ipp.lon_deg,
            mag_lat_deg: link.mag_lat_deg,
            mag_lon_deg: link.mag_lon_deg,
            lst_h: link.local_solar_time_h,
            elevation_deg: link.elevation_deg,
            x_obs: None,
            x_eph: [
                link.ipp.lat_deg,
                link.ipp.lon_deg,
                link.mag_lat_deg,
                link.mag_lon_deg,
                link.elevation_deg,
                sd,
                cd,
                sl,
                cl,
            ],
            label: None,
        }
    }

    fn point(&self) -> crate::geo::GeoPoint {
        crate::geo::GeoPoint { lat_deg: self.lat_deg, lon_deg: self.lon_deg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub t_s: TimeStamp,
    pub nodes: Vec<IppNode>,
    /// Directed `(src, dst)` pairs; every node receives its nearest
    /// neighbours as in-edges.
    pub edges: Vec<(u32, u32)>,
    pub edge_feats: Vec<[f64; EDGE_DIM]>,
}

/// `[haversine_km, dlat, dlon, dmag_lat, dmag_lon, lst_sep_deg, zero_baseline]`
/// with deltas taken source minus target, longitudes wrapped.
pub fn edge_features(src: &IppNode, dst: &IppNode) -> [f64; EDGE_DIM] {
    let zb = src.key.sat == dst.key.sat && src.key.station != dst.key.station;
    [
        haversine_km(src.point(), dst.point(), shell_radius_km()),
        src.lat_deg - dst.lat_deg,
        wrap_lon_deg(src.lon_deg - dst.lon_deg),
        src.mag_lat_deg - dst.mag_lat_deg,
        wrap_lon_deg(src.mag_lon_deg - dst.mag_lon_deg),
        lst_angular_sep_deg(src.lst_h, dst.lst_h),
        zb as u8 as f64,
    ]
}

/// Directed K-NN graph: for each node, in-edges from its `min(k, n - 1)`
/// nearest other nodes, ties broken by node identity.
pub fn build_snapshot(t: TimeStamp, mut nodes: Vec<IppNode>, k: usize) -> GraphSnapshot {
    nodes.sort_by(|a, b| a.key.cmp(&b.key));
    let n = nodes.len();
    let r = shell_radius_km();
    let mut edges = Vec::with_capacity(n * k.min(n.saturating_sub(1)));
    let mut feats = Vec::with_capacity(edges.capacity());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (haversine_km(nodes[j].point(), nodes[i].point(), r), j)),
        );
        // Node order is identity order, so the index breaks ties.
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            edges.push((j as u32, i as u32));
            feats.push(edge_features(&nodes[j], &nodes[i]));
        }
    }
    GraphSnapshot { t_s: t, nodes, edges, edge_feats: feats }
}

/// Static inputs shared by every snapshot of a run.
pub struct GraphContext<'a> {
    pub stations: &'a [Station],
    pub tracks: &'a [SatelliteTrack],
    pub pole: MagneticPole,
    pub elevation_mask_deg: f64,
    pub k: usize,
    /// When false the day-of-year pair of `x_eph` is held at zero.
    pub day_of_year: bool,
    /// When false Dst and F10.7 in `x_obs` are held at zero.
    pub space_weather: bool,
}

impl<'a> GraphContext<'a> {
    pub fn new(stations: &'a [Station], tracks: &'a [SatelliteTrack]) -> Self {
        Self {
            stations,
            tracks,
            pole: MagneticPole::default(),
            elevation_mask_deg: DEFAULT_ELEVATION_MASK_DEG,
            k: DEFAULT_K,
            day_of_year: true,
            space_weather: true,
        }
    }
}

fn node_for(ctx: &GraphContext<'_>, link: &LosLink, t: TimeStamp) -> IppNode {
    let mut n = IppNode::from_link(link, t);
    if !ctx.day_of_year {
        n.x_eph[5] = 0.0;
        n.x_eph[6] = 0.0;
    }
    n
}

/// Latest index row at or before `t`.
fn index_at(indices: &[IndexRow], t: TimeStamp) -> Option<&IndexRow> {
    let i = indices.partition_point(|r| r.t_s <= t);
    i.checked_sub(1).map(|i| &indices[i])
}

/// One snapshot per 5-minute step in `first..=last`. Nodes are all links
/// the ephemeris places above the mask plus any observed link; observed
/// rows attach `x_obs` and labels.
pub fn build_snapshots(
    ctx: &GraphContext<'_>,
    first: TimeStamp,
    last: TimeStamp,
    rows: &[FeatureRow],
    labels: &[LabelRow],
    indices: &[IndexRow],
) -> Result<Vec<GraphSnapshot>> {
    if !first.is_aligned(MODEL_CADENCE_S) || last < first {
        return Err(Error::Malformed(format!("bad snapshot range {}..{}", first.0, last.0)));
    }
    let mut by_t: BTreeMap<TimeStamp, Vec<&FeatureRow>> = BTreeMap::new();
    for r in rows {
        by_t.entry(r.t_s).or_default().push(r);
    }
    let label_of: BTreeMap<(TimeStamp, &str, &str), NodeLabel> = labels
        .iter()
        .map(|l| ((l.t_s, &*l.station, &*l.sat), l.label))
        .collect();
    let stations: BTreeMap<&str, &Station> = ctx.stations.iter().map(|s| (&*s.id, s)).collect();
    let steps = ((last.0 - first.0) / MODEL_CADENCE_S) as usize + 1;
    (0..steps)
        .into_par_iter()
        .map(|s| {
            let t = first.offset(s as i64 * MODEL_CADENCE_S);
            let mut nodes: BTreeMap<NodeKey, IppNode> =
                visible_links(ctx.stations, ctx.tracks, t, ctx.elevation_mask_deg, ctx.pole)
                    .iter()
                    .map(|l| {
                        let n = node_for(ctx, l, t);
                        (n.key.clone(), n)
                    })
                    .collect();
            let idx = index_at(indices, t).filter(|_| ctx.space_weather);
            for r in by_t.get(&t).map(Vec::as_slice).unwrap_or(&[]) {
                let key = NodeKey { station: r.station.clone(), sat: r.sat.clone() };
                if !nodes.contains_key(&key) {
                    let st = stations.get(&*r.station).ok_or_else(|| {
                        Error::Malformed(format!("feature row for unknown station {}", r.station))
                    })?;
                    let ipp = ipp_from_los(
                        st.position,
                        st.height_km,
                        r.azimuth_deg,
                        r.elevation_deg,
                        SHELL_HEIGHT_KM,
                    )?;
                    let (mlat, mlon) = dipole_mag_coords(ipp.point, ctx.pole);
                    let link = LosLink {
                        station_id: r.station.clone(),
                        satellite_id: r.sat.clone(),
                        elevation_deg: r.elevation_deg,
                        azimuth_deg: r.azimuth_deg,
                        ipp: ipp.point,
                        mag_lat_deg: mlat,
                        mag_lon_deg: mlon,
                        local_solar_time_h: local_solar_time_h(ipp.point.lon_deg, t),
                    };
                    nodes.insert(key.clone(), node_for(ctx, &link, t));
                }
                let node = nodes.get_mut(&key).expect("inserted above");
                node.x_obs = Some([
                    r.roti_tecu_per_min,
                    r.dtec_rate_tecu_per_min,
                    r.eff_snr_dbhz,
                    idx.map_or(0.0, |i| i.dst_nt),
                    idx.map_or(0.0, |i| i.f107_sfu),
                ]);
                node.label = label_of.get(&(t, &*r.station, &*r.sat)).copied();
            }
            Ok(build_snapshot(t, nodes.into_values().collect(), ctx.k))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax<const D: usize> {
    #[serde(with = "arr")]
    pub min: [f64; D],
    #[serde(with = "arr")]
    pub max: [f64; D],
}

mod arr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(a: &[f64; D], s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(d: De) -> Result<[f64; D], De::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"fixed-length array"))
    }
}

impl<const D: usize> MinMax<D> {
    fn empty() -> Self {
        Self { min: [f64::INFINITY; D], max: [f64::NEG_INFINITY; D] }
    }

    fn observe(&mut self, x: &[f64; D]) {
        for i in 0..D {
            self.min[i] = self.min[i].min(x[i]);
            self.max[i] = self.max[i].max(x[i]);
        }
    }

    fn is_fitted(&self) -> bool {
        self.min.iter().all(|v| v.is_finite())
    }

    /// Affine map to the training range; constant features map to 0.
    pub fn apply(&self, x: &[f64; D]) -> [f64; D] {
        let mut out = [0.0; D];
        for i in 0..D {
            let span = self.max[i] - self.min[i];
            out[i] = if span > 0.0 { (x[i] - self.min[i]) / span } else { 0.0 };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs: MinMax<OBS_DIM>,
    pub eph: MinMax<EPH_DIM>,
    pub edge: MinMax<EDGE_DIM>,
}

/// Min-max statistics over the given (training) snapshots.
pub fn fit_norm<'a>(snapshots: impl IntoIterator<Item = &'a GraphSnapshot>) -> Result<NormStats> {
    let mut s = NormStats { obs: MinMax::empty(), eph: MinMax::empty(), edge: MinMax::empty() };
    for snap in snapshots {
        for n in &snap.nodes {
            if let Some(x) = &n.x_obs {
                s.obs.observe(x);
            }
            s.eph.observe(&n.x_eph);
        }
        for e in &snap.edge_feats {
            s.edge.observe(e);
        }
    }
    if !(s.obs.is_fitted() && s.eph.is_fitted() && s.edge.is_fitted()) {
        return Err(Error::EmptyNormFit);
    }
    Ok(s)
}

/// Writes one JSON object per line.
pub fn write_snapshots<W: Write>(mut w: W, snaps: &[GraphSnapshot]) -> Result<()> {
    for s in snaps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshots<R: BufRead>(r: R) -> Result<Vec<GraphSnapshot>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node(station: &str, sat: &str, lat: f64, lon: f64) -> IppNode {
        let link = LosLink {
            station_id: station.into(),
            satellite_id: sat.into(),
            elevation_deg: 50.0,
            azimuth_deg: 10.0,
            ipp: crate::geo::GeoPoint { lat_deg: lat, lon_deg: lon },
            mag_lat_deg: lat - 9.0,
            mag_lon_deg: wrap_lon_deg(lon + 175.0),
            local_solar_time_h: (lon / 15.0).rem_euclid(24.0),
        };
        IppNode::from_link(&link, TimeStamp(1_709_251_200))
    }

    fn random_nodes(seed: u64, n: usize) -> Vec<IppNode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                node(
                    if i % 2 == 0 { "A" } else { "B" },
                    &format!("G{:02}", i / 2),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(100.0..108.0),
                )
            })
            .collect()
    }

    #[test]
    fn small_n_rules() {
        let t = TimeStamp(0);
        assert!(build_snapshot(t, vec![node("A", "G01", 0.0, 100.0)], 4).edges.is_empty());
        let s = build_snapshot(
            t,
            vec![node("A", "G01", 0.0, 100.0), node("A", "G02", 1.0, 100.0), node("A", "G03", 2.0, 101.0)],
            4,
        );
        assert_eq!(s.edges.len(), 6);
        for i in 0..3u32 {
            assert_eq!(s.edges.iter().filter(|e| e.1 == i).count(), 2);
            assert!(s.edges.iter().all(|e| e.0 != e.1));
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let s = build_snapshot(TimeStamp(0), random_nodes(11, 8), 4);
        let r = shell_radius_km();
        for i in 0..8 {
            let mut all: Vec<(f64, usize)> = (0..8)
                .filter(|&j| j != i)
                .map(|j| (haversine_km(s.nodes[j].point(), s.nodes[i].point(), r), j))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<u32> = all.iter().take(4).map(|x| x.1 as u32).collect();
            let got: Vec<u32> = s.edges.iter().filter(|e| e.1 == i as u32).map(|e| e.0).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ties_break_by_identity() {
        let nodes = vec![
            node("A", "G03", 0.0, 101.0),
            node("A", "G01", 0.0, 100.0),
            node("A", "G02", 0.0, 99.0),
            node("A", "G04", 2.0, 100.0),
        ];
        let s = build_snapshot(TimeStamp(0), nodes, 2);
        // G01 sits at index 0; G02 and G03 are equidistant from it.
        let into0: Vec<u32> = s.edges.iter().filter(|e| e.1 == 0).map(|e| e.0).collect();
        assert_eq!(into0, vec![1, 2]);
    }

    #[test]
    fn edge_feature_cases() {
        let a = node("NTUS", "G05", 1.0, 104.0);
        let b = node("SIN1", "G05", 1.0, 104.0);
        let f = edge_features(&a, &b);
        assert_eq!(f[ZERO_BASELINE_FLAG], 1.0);
        assert!(f[..6].iter().all(|v| v.abs() < 1e-12));
        let c = node("NTUS", "E07", 3.0, 179.0);
        let d = node("NTUS", "G05", 1.0, -179.0);
        let f = edge_features(&c, &d);
        assert_eq!(f[ZERO_BASELINE_FLAG], 0.0);
        assert!((f[1] - 2.0).abs() < 1e-12);
        assert!((f[2] + 2.0).abs() < 1e-9);
        assert_eq!(edge_features(&a, &a)[ZERO_BASELINE_FLAG], 0.0);
    }

    #[test]
    fn norm_fit_and_apply() {
        let s = build_snapshot(TimeStamp(0), random_nodes(3, 6), 4);
        assert!(matches!(fit_norm(std::iter::empty()), Err(Error::EmptyNormFit)));
        // No observed node: still empty for x_obs.
        assert!(fit_norm([&s]).is_err());
        let mut s2 = s.clone();
        for (i, n) in s2.nodes.iter_mut().enumerate() {
            n.x_obs = Some([0.1 * i as f64, 1.0, 40.0, -20.0, 150.0]);
        }
        let st = fit_norm([&s2]).unwrap();
        let lo = st.obs.min;
        let hi = st.obs.max;
        assert_eq!(st.obs.apply(&lo)[0], 0.0);
        assert_eq!(st.obs.apply(&hi)[0], 1.0);
        let q = [lo[0] + 0.25 * (hi[0] - lo[0]), 1.0, 40.0, -20.0, 150.0];
        assert!((st.obs.apply(&q)[0] - 0.25).abs() < 1e-12);
        // Constant columns map to zero, outside range extrapolates.
        assert_eq!(st.obs.apply(&q)[1], 0.0);
        assert!((st.obs.apply(&[2.0 * hi[0], 0.0, 0.0, 0.0, 0.0])[0] - 2.0).abs() < 1e-12);
        let json = serde_json::to_string(&st).unwrap();
        assert_eq!(serde_json::from_str::<NormStats>(&json).unwrap(), st);
    }

    #[test]
    fn snapshot_jsonl_round_trip() {
        let mut s = build_snapshot(TimeStamp(300), random_nodes(5, 7), 4);
        s.nodes[0].x_obs = Some([0.123456789, -1.5, 40.25, -33.0, 151.7]);
        s.nodes[0].label = Some(NodeLabel::Invalid);
        let mut buf = Vec::new();
        write_snapshots(&mut buf, &[s.clone(), s.clone()]).unwrap();
        let back = read_snapshots(buf.as_slice()).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    #[test]
    fn identity_never_in_features() {
        // Renaming nodes while keeping their order relative to each other
        // leaves every feature unchanged.
        let a = random_nodes(9, 6);
        let b: Vec<IppNode> = a
            .iter()
            .map(|n| {
                let mut m = n.clone();
                m.key.station = format!("X{}", n.key.station).into();
                m.key.sat = format!("Z{}", n.key.sat).into();
                m
            })
            .collect();
        let sa = build_snapshot(TimeStamp(0), a, 4);
        let sb = build_snapshot(TimeStamp(0), b, 4);
        assert_eq!(sa.edges, sb.edges);
        assert_eq!(sa.edge_feats, sb.edge_feats);
        for (x, y) in sa.nodes.iter().zip(&sb.nodes) {
            assert_eq!(x.x_eph, y.x_eph);
        }
    }

    proptest! {
        #[test]
        fn permutation_gives_isomorphic_snapshot(seed in 0u64..500, n in 1usize..14) {
            let nodes = random_nodes(seed, n);
            let mut shuffled = nodes.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAB);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = build_snapshot(TimeStamp(0), nodes, 4);
            let b = build_snapshot(TimeStamp(0), shuffled, 4);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn edge_distance_is_shell_haversine(seed in 0u64..500, n in 2usize..12) {
            let s = build_snapshot(TimeStamp(0), random_nodes(seed, n), 4);
            let r = shell_radius_km();
            for (e, f) in s.edges.iter().zip(&s.edge_feats) {
                let d = haversine_km(s.nodes[e.0 as usize].point(), s.nodes[e.1 as usize].point(), r);
                prop_assert!((f[0] - d).abs() < 1e-9);
            }
            for i in 0..n as u32 {
                prop_assert_eq!(s.edges.iter().filter(|e| e.1 == i).count(), 4.min(n - 1));
            }
        }
    }
}
