//! Observed per-link features from dual-frequency carrier phase: relative
//! slant TEC, ROT, ROTI and effective SNR at the 5-minute model cadence.
//!
//! Series are never imputed. Any epoch that is filtered out, flagged as a
//! phase jump, or simply missing becomes a gap, and every quantity that
//! would need the missing epoch is left absent.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::TimeStamp;

pub const SPEED_OF_LIGHT_M_S: f64 = 299_792_458.0;
/// Ionospheric refraction constant, m^3 s^-2 per TECU.
pub const K_ION: f64 = 40.3e16;
pub const RAW_CADENCE_S: i64 = 30;
pub const MODEL_CADENCE_S: i64 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub t_s: TimeStamp,
    pub station_id: Arc<str>,
    pub satellite_id: Arc<str>,
    pub phase_f1_cycles: f64,
    pub phase_f2_cycles: f64,
    pub freq_f1_hz: f64,
    pub freq_f2_hz: f64,
    pub snr_f1_dbhz: f64,
    pub snr_f2_dbhz: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

impl ObsRecord {
    /// Geometry-free phase combination `L1*lambda1 - L2*lambda2` in metres.
    pub fn geometry_free_m(&self) -> f64 {
        self.phase_f1_cycles * SPEED_OF_LIGHT_M_S / self.freq_f1_hz
            - self.phase_f2_cycles * SPEED_OF_LIGHT_M_S / self.freq_f2_hz
    }

    pub fn effective_snr(&self) -> f64 {
        self.snr_f1_dbhz.min(self.snr_f2_dbhz)
    }
}

/// TECU per metre of geometry-free delay for a frequency pair.
pub fn tecu_per_metre(f1_hz: f64, f2_hz: f64) -> Result<f64> {
    if f1_hz == f2_hz {
        return Err(Error::DegenerateFrequencies(f1_hz));
    }
    let (a, b) = (f1_hz * f1_hz, f2_hz * f2_hz);
    Ok(a * b / (K_ION * (a - b)))
}

/// Relative slant TEC in TECU; carries the unknown arc bias.
pub fn geometry_free_stec(rec: &ObsRecord) -> Result<f64> {
    Ok(rec.geometry_free_m() * tecu_per_metre(rec.freq_f1_hz, rec.freq_f2_hz)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub elevation_mask_deg: f64,
    pub snr_cutoff_dbhz: f64,
    /// Geometry-free phase change between consecutive 30 s epochs above
    /// which the later epoch is treated as an artifact.
    pub jump_threshold_m: f64,
    pub roti_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            elevation_mask_deg: 30.0,
            snr_cutoff_dbhz: 25.0,
            jump_threshold_m: 0.2,
            roti_window: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterOutcome {
    pub keep: bool,
    pub artifact: bool,
}

/// Elevation/SNR screening plus phase-jump detection against the record
/// one raw epoch earlier, when there is one.
pub fn quality_filter(rec: &ObsRecord, prev: Option<&ObsRecord>, cfg: &FeatureConfig) -> FilterOutcome {
    let keep = rec.elevation_deg >= cfg.elevation_mask_deg
        && rec.effective_snr() >= cfg.snr_cutoff_dbhz;
    let artifact = match prev {
        Some(p) if rec.t_s.0 - p.t_s.0 == RAW_CADENCE_S => {
            (rec.geometry_free_m() - p.geometry_free_m()).abs() > cfg.jump_threshold_m
        }
        _ => false,
    };
    FilterOutcome { keep, artifact }
}

/// Rate of TEC in TECU/min; emitted only where the previous raw epoch exists.
pub fn rot(stec: &[(TimeStamp, f64)]) -> Vec<(TimeStamp, f64)> {
    let minutes = RAW_CADENCE_S as f64 / 60.0;
    stec.windows(2)
        .filter(|w| w[1].0 .0 - w[0].0 .0 == RAW_CADENCE_S)
        .map(|w| (w[1].0, (w[1].1 - w[0].1) / minutes))
        .collect()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Population standard deviation of ROT over the trailing window, stamped
/// at 5-minute epochs whose window is fully populated.
pub fn roti(rot: &[(TimeStamp, f64)], window: usize) -> Vec<(TimeStamp, f64)> {
    let mut out = Vec::new();
    if window == 0 || rot.len() < window {
        return out;
    }
    let span = (window as i64 - 1) * RAW_CADENCE_S;
    for end in (window - 1)..rot.len() {
        let t = rot[end].0;
        if !t.is_aligned(MODEL_CADENCE_S) {
            continue;
        }
        let start = end + 1 - window;
        if t.0 - rot[start].0 .0 != span {
            continue;
        }
        let vals: Vec<f64> = rot[start..=end].iter().map(|r| r.1).collect();
        out.push((t, population_std(&vals)));
    }
    out
}

/// One screened 30 s epoch of a link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEpoch {
    pub t: TimeStamp,
    pub stec: f64,
    pub eff_snr: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

/// One 5-minute observed feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub t_s: TimeStamp,
    pub station: Arc<str>,
    pub sat: Arc<str>,
    pub roti_tecu_per_min: f64,
    pub dtec_rate_tecu_per_min: f64,
    pub eff_snr_dbhz: f64,
    pub stec_rel_tecu: f64,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
}

/// Stamps a 5-minute row wherever ROTI exists. TEC rate differences the
/// slant TEC across the 5-minute step.
pub fn downsample_5min(
    station: &Arc<str>,
    sat: &Arc<str>,
    epochs: &[RawEpoch],
    window: usize,
) -> Vec<FeatureRow> {
    let stec: Vec<(TimeStamp, f64)> = epochs.iter().map(|e| (e.t, e.stec)).collect();
    let by_time: BTreeMap<i64, &RawEpoch> = epochs.iter().map(|e| (e.t.0, e)).collect();
    let rot_series = rot(&stec);
    roti(&rot_series, window)
        .into_iter()
        .filter_map(|(t, r)| {
            let cur = by_time.get(&t.0)?;
            let back = by_time.get(&(t.0 - MODEL_CADENCE_S))?;
            Some(FeatureRow {
                t_s: t,
                station: station.clone(),
                sat: sat.clone(),
                roti_tecu_per_min: r,
                dtec_rate_tecu_per_min: (cur.stec - back.stec) / (MODEL_CADENCE_S as f64 / 60.0),
                eff_snr_dbhz: cur.eff_snr,
                stec_rel_tecu: cur.stec,
                elevation_deg: cur.elevation_deg,
                azimuth_deg: cur.azimuth_deg,
            })
        })
        .collect()
}

/// Screens one link's raw records (sorted by time) into 30 s epochs.
pub fn screen_link(records: &[ObsRecord], cfg: &FeatureConfig) -> Result<Vec<RawEpoch>> {
    let mut out = Vec::with_capacity(records.len());
    let mut prev: Option<&ObsRecord> = None;
    for rec in records {
        let outcome = quality_filter(rec, prev, cfg);
        prev = Some(rec);
        if outcome.keep && !outcome.artifact {
            out.push(RawEpoch {
                t: rec.t_s,
                stec: geometry_free_stec(rec)?,
                eff_snr: rec.effective_snr(),
                elevation_deg: rec.elevation_deg,
                azimuth_deg: rec.azimuth_deg,
            });
        }
    }
    Ok(out)
}

/// Full per-link derivation: screening, STEC, ROT, ROTI and downsampling.
pub fn derive_link(records: &[ObsRecord], cfg: &FeatureConfig) -> Result<Vec<FeatureRow>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let epochs = screen_link(records, cfg)?;
    Ok(downsample_5min(&first.station_id, &first.satellite_id, &epochs, cfg.roti_window))
}

/// Groups records by link, derives each link independently, and returns
/// rows ordered by `(t, station, sat)`.
pub fn derive_features(records: &[ObsRecord], cfg: &FeatureConfig) -> Result<Vec<FeatureRow>> {
    let mut links: BTreeMap<(Arc<str>, Arc<str>), Vec<ObsRecord>> = BTreeMap::new();
    for r in records {
        links
            .entry((r.station_id.clone(), r.satellite_id.clone()))
            .or_default()
            .push(r.clone());
    }
    let per_link: Vec<Vec<FeatureRow>> = links
        .into_par_iter()
        .map(|(_, mut recs)| {
            recs.sort_by_key(|r| r.t_s);
            derive_link(&recs, cfg)
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<FeatureRow> = per_link.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn sort_rows(rows: &mut [FeatureRow]) {
    rows.sort_by(|a, b| (a.t_s, &a.station, &a.sat).cmp(&(b.t_s, &b.station, &b.sat)));
}

pub fn write_records<W: Write>(w: W, records: &[ObsRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ObsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let recs = rdr.deserialize().collect::<std::result::Result<Vec<ObsRecord>, _>>()?;
    for rec in &recs {
        if rec.freq_f1_hz == rec.freq_f2_hz {
            return Err(Error::DegenerateFrequencies(rec.freq_f1_hz));
        }
    }
    Ok(recs)
}

pub fn write_feature_rows<W: Write>(w: W, rows: &[FeatureRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_feature_rows<R: Read>(r: R) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<FeatureRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const F1: f64 = 1_575.42e6;
    const F2: f64 = 1_227.60e6;

    /// Record whose geometry-free delay is `gf_m` metres.
    fn rec(t: i64, gf_m: f64) -> ObsRecord {
        let l2 = 1.0e8;
        let l1 = (gf_m + l2 * SPEED_OF_LIGHT_M_S / F2) * F1 / SPEED_OF_LIGHT_M_S;
        ObsRecord {
            t_s: TimeStamp(t),
            station_id: "A".into(),
            satellite_id: "G01".into(),
            phase_f1_cycles: l1,
            phase_f2_cycles: l2,
            freq_f1_hz: F1,
            freq_f2_hz: F2,
            snr_f1_dbhz: 45.0,
            snr_f2_dbhz: 42.0,
            elevation_deg: 60.0,
            azimuth_deg: 10.0,
        }
    }

    fn series(values: &[f64], t0: i64) -> Vec<(TimeStamp, f64)> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (TimeStamp(t0 + 30 * i as i64), *v))
            .collect()
    }

    #[test]
    fn stec_zero_linear_and_gps_constant() {
        let mut r = rec(0, 0.0);
        r.phase_f1_cycles = r.phase_f2_cycles * F1 / F2;
        assert!(geometry_free_stec(&r).unwrap().abs() < 1e-6);
        let mut a = rec(0, 0.0);
        a.phase_f1_cycles = 3.0e7;
        a.phase_f2_cycles = 2.0e7;
        let mut b = a.clone();
        b.phase_f1_cycles *= 2.0;
        b.phase_f2_cycles *= 2.0;
        let sa = geometry_free_stec(&a).unwrap();
        assert!((geometry_free_stec(&b).unwrap() - 2.0 * sa).abs() < 1e-9 * sa.abs());
        // f1^2 f2^2 / (K (f1^2 - f2^2)) evaluated by hand: 9.5196 TECU per metre
        let k = tecu_per_metre(F1, F2).unwrap();
        assert!((k - 9.519_6).abs() < 1e-3, "{k}");
        let one_metre = geometry_free_stec(&rec(0, 1.0)).unwrap();
        assert!((one_metre - k).abs() < 1e-6);
        let mut same = rec(0, 1.0);
        same.freq_f2_hz = F1;
        assert!(geometry_free_stec(&same).is_err());
    }

    #[test]
    fn rot_cases() {
        assert!(rot(&series(&[5.0; 8], 0)).iter().all(|r| r.1 == 0.0));
        let ramp: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        for (_, v) in rot(&series(&ramp, 0)) {
            assert!((v - 0.2).abs() < 1e-12);
        }
        let mut s = series(&[1.0, 2.0, 3.0], 0);
        s.push((TimeStamp(120), 4.0));
        s.push((TimeStamp(150), 5.0));
        let r = rot(&s);
        let stamps: Vec<i64> = r.iter().map(|x| x.0 .0).collect();
        assert_eq!(stamps, vec![30, 60, 150]);
    }

    #[test]
    fn roti_cases() {
        let flat = series(&[0.7; 10], 30);
        let out = roti(&flat, 10);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, TimeStamp(300));
        assert!(out[0].1.abs() < 1e-12);
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 0.4 } else { -0.4 }).collect();
        let out = roti(&series(&alt, 30), 10);
        assert!((out[0].1 - 0.4).abs() < 1e-12);
        let mut partial = series(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], 30);
        partial.drain(2..5);
        assert!(roti(&partial, 10).is_empty());
    }

    #[test]
    fn quality_filter_cases() {
        let cfg = FeatureConfig::default();
        let mut r = rec(30, 0.0);
        r.elevation_deg = 29.9;
        assert!(!quality_filter(&r, None, &cfg).keep);
        let mut r = rec(30, 0.0);
        r.snr_f1_dbhz = 40.0;
        r.snr_f2_dbhz = 24.9;
        assert!(!quality_filter(&r, None, &cfg).keep);
        let prev = rec(0, 0.0);
        let jumped = rec(30, 5.0 * cfg.jump_threshold_m);
        let out = quality_filter(&jumped, Some(&prev), &cfg);
        assert!(out.keep && out.artifact);
        let smooth = rec(30, 0.5 * cfg.jump_threshold_m);
        assert!(!quality_filter(&smooth, Some(&prev), &cfg).artifact);
    }

    #[test]
    fn artifact_epoch_breaks_series() {
        let cfg = FeatureConfig::default();
        let mut recs: Vec<ObsRecord> = (0..=20).map(|i| rec(30 * i, 0.01 * i as f64)).collect();
        let jump = recs[12].geometry_free_m() + 1.0;
        let base = recs[12].clone();
        recs[12] = rec(base.t_s.0, jump);
        let epochs = screen_link(&recs, &cfg).unwrap();
        assert_eq!(epochs.len(), 19);
        assert!(epochs.iter().all(|e| e.t.0 != 360));
    }

    #[test]
    fn downsample_cadence_and_rates() {
        assert!(derive_link(&[], &FeatureConfig::default()).unwrap().is_empty());
        // 0..=600 s at 30 s: windows complete at 300 and 600.
        let recs: Vec<ObsRecord> = (0..=20).map(|i| rec(30 * i, 0.02 * i as f64)).collect();
        let rows = derive_link(&recs, &FeatureConfig::default()).unwrap();
        let stamps: Vec<i64> = rows.iter().map(|r| r.t_s.0).collect();
        assert_eq!(stamps, vec![300, 600]);
        let k = tecu_per_metre(F1, F2).unwrap();
        // 0.02 m per 30 s = 10 * 0.02 m per 5 minutes
        let expect = 10.0 * 0.02 * k / 5.0;
        for r in &rows {
            assert!((r.dtec_rate_tecu_per_min - expect).abs() < 1e-6);
            assert!(r.roti_tecu_per_min.abs() < 1e-6);
            assert_eq!(r.eff_snr_dbhz, 42.0);
        }
    }

    #[test]
    fn csv_round_trip() {
        let recs: Vec<ObsRecord> = (0..3).map(|i| rec(30 * i, 0.1 * i as f64)).collect();
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_s,station_id,satellite_id,phase_f1_cycles"));
        assert_eq!(read_records(buf.as_slice()).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn roti_nonnegative_and_offset_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 30..60),
            offset in -500.0f64..500.0,
        ) {
            let stec = series(&vals, 0);
            let shifted: Vec<(TimeStamp, f64)> = stec.iter().map(|(t, v)| (*t, v + offset)).collect();
            let a = roti(&rot(&stec), 10);
            let b = roti(&rot(&shifted), 10);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(x.1 >= 0.0);
                prop_assert!((x.1 - y.1).abs() < 1e-8);
            }
        }

        #[test]
        fn prefiltering_commutes(drops in proptest::collection::vec(0usize..40, 0..8)) {
            let cfg = FeatureConfig::default();
            let mut recs: Vec<ObsRecord> = (0..40).map(|i| rec(30 * i, 0.003 * ((i * 7) % 5) as f64)).collect();
            for d in &drops {
                recs[*d].snr_f2_dbhz = 10.0;
            }
            let direct = derive_link(&recs, &cfg).unwrap();
            let kept: Vec<ObsRecord> = recs.iter().filter(|r| quality_filter(r, None, &cfg).keep).cloned().collect();
            let pre = derive_link(&kept, &cfg).unwrap();
            prop_assert_eq!(&direct, &pre);
            let windows = 40 / 10;
            prop_assert!(direct.len() <= windows);
        }
    }
}
