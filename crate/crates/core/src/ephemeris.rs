//! Satellite orbits, line-of-sight visibility and the forecast-horizon
//! link schedule.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{
    dipole_mag_coords, ipp_from_los, local_solar_time_h, GeoPoint, MagneticPole, TimeStamp,
    EARTH_RADIUS_KM, SHELL_HEIGHT_KM,
};

pub const EARTH_MU_KM3_S2: f64 = 398_600.4418;
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_0e-5;
pub const DEFAULT_ELEVATION_MASK_DEG: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: Arc<str>,
    pub position: GeoPoint,
    #[serde(default)]
    pub height_km: f64,
}

impl Station {
    pub fn ecef(&self) -> [f64; 3] {
        self.position.to_ecef(EARTH_RADIUS_KM + self.height_km)
    }
}

/// Circular Keplerian orbit. The argument of latitude is referenced to
/// `t = 0` (the Unix epoch), where the inertial and Earth-fixed frames
/// coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitElements {
    pub satellite_id: Arc<str>,
    pub constellation: char,
    pub semi_major_axis_km: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub arg_lat_at_epoch_deg: f64,
}

impl OrbitElements {
    pub fn new(
        satellite_id: &str,
        semi_major_axis_km: f64,
        inclination_deg: f64,
        raan_deg: f64,
        arg_lat_at_epoch_deg: f64,
    ) -> Result<Self> {
        if semi_major_axis_km <= EARTH_RADIUS_KM || !(0.0..=180.0).contains(&inclination_deg) {
            return Err(Error::InvalidScenario(format!(
                "orbit {satellite_id}: a={semi_major_axis_km} km, i={inclination_deg} deg"
            )));
        }
        Ok(Self {
            satellite_id: satellite_id.into(),
            constellation: satellite_id.chars().next().unwrap_or('X'),
            semi_major_axis_km,
            inclination_deg,
            raan_deg,
            arg_lat_at_epoch_deg,
        })
    }

    pub fn mean_motion_rad_s(&self) -> f64 {
        (EARTH_MU_KM3_S2 / self.semi_major_axis_km.powi(3)).sqrt()
    }

    pub fn period_s(&self) -> f64 {
        TAU / self.mean_motion_rad_s()
    }

    /// Inertial position in km.
    pub fn inertial_position(&self, t: TimeStamp) -> [f64; 3] {
        let u = self.arg_lat_at_epoch_deg.to_radians() + self.mean_motion_rad_s() * t.0 as f64;
        let (su, cu) = u.sin_cos();
        let (so, co) = self.raan_deg.to_radians().sin_cos();
        let (si, ci) = self.inclination_deg.to_radians().sin_cos();
        let a = self.semi_major_axis_km;
        [
            a * (co * cu - so * su * ci),
            a * (so * cu + co * su * ci),
            a * (su * si),
        ]
    }
}

/// Earth-fixed position of a circular orbit at `t`.
pub fn propagate(e: &OrbitElements, t: TimeStamp) -> [f64; 3] {
    let p = e.inertial_position(t);
    let theta = EARTH_ROTATION_RAD_S * t.0 as f64;
    let (s, c) = theta.sin_cos();
    [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]]
}

/// Earth-fixed samples for one satellite, linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedTrack {
    pub satellite_id: Arc<str>,
    pub samples: Vec<(i64, [f64; 3])>,
}

impl TabulatedTrack {
    pub fn position(&self, t: TimeStamp) -> Option<[f64; 3]> {
        let s = &self.samples;
        let idx = s.partition_point(|(ts, _)| *ts <= t.0);
        if idx == 0 {
            return None;
        }
        let (t0, p0) = s[idx - 1];
        if t0 == t.0 {
            return Some(p0);
        }
        let (t1, p1) = *s.get(idx)?;
        let w = (t.0 - t0) as f64 / (t1 - t0) as f64;
        Some([
            p0[0] + w * (p1[0] - p0[0]),
            p0[1] + w * (p1[1] - p0[1]),
            p0[2] + w * (p1[2] - p0[2]),
        ])
    }
}

#[derive(Debug, Deserialize)]
struct OrbitRow {
    t_s: i64,
    sat_id: String,
    x_km: f64,
    y_km: f64,
    z_km: f64,
}

/// Reads the `t_s,sat_id,x_km,y_km,z_km` table.
pub fn read_orbit_table<R: Read>(reader: R) -> Result<Vec<TabulatedTrack>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["t_s", "sat_id", "x_km", "y_km", "z_km"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::OrbitTable(format!("unexpected header {headers:?}")));
    }
    let mut tracks: BTreeMap<String, Vec<(i64, [f64; 3])>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: OrbitRow = row?;
        let samples = tracks.entry(row.sat_id.clone()).or_default();
        if let Some((last, _)) = samples.last() {
            if row.t_s <= *last {
                return Err(Error::OrbitTable(format!(
                    "{}: t_s {} not strictly increasing",
                    row.sat_id, row.t_s
                )));
            }
        }
        samples.push((row.t_s, [row.x_km, row.y_km, row.z_km]));
    }
    Ok(tracks
        .into_iter()
        .map(|(id, samples)| TabulatedTrack {
            satellite_id: id.into(),
            samples,
        })
        .collect())
}

/// A source of Earth-fixed satellite positions.
#[derive(Debug, Clone, PartialEq)]
pub enum SatelliteTrack {
    Circular(OrbitElements),
    Tabulated(TabulatedTrack),
}

impl SatelliteTrack {
    pub fn satellite_id(&self) -> &Arc<str> {
        match self {
            SatelliteTrack::Circular(e) => &e.satellite_id,
            SatelliteTrack::Tabulated(t) => &t.satellite_id,
        }
    }

    pub fn position(&self, t: TimeStamp) -> Option<[f64; 3]> {
        match self {
            SatelliteTrack::Circular(e) => Some(propagate(e, t)),
            SatelliteTrack::Tabulated(track) => track.position(t),
        }
    }
}

/// Azimuth and elevation (degrees) of `target` seen from `station`.
pub fn look_angles(station: &Station, target: [f64; 3]) -> (f64, f64) {
    let r = station.ecef();
    let d = [target[0] - r[0], target[1] - r[1], target[2] - r[2]];
    let (sp, cp) = station.position.lat_deg.to_radians().sin_cos();
    let (sl, cl) = station.position.lon_deg.to_radians().sin_cos();
    let east = -sl * d[0] + cl * d[1];
    let north = -sp * cl * d[0] - sp * sl * d[1] + cp * d[2];
    let up = cp * cl * d[0] + cp * sl * d[1] + sp * d[2];
    let horiz = east.hypot(north);
    let el = up.atan2(horiz).to_degrees();
    let az = east.atan2(north).to_degrees().rem_euclid(360.0);
    (az, el)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosLink {
    pub station_id: Arc<str>,
    pub satellite_id: Arc<str>,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub ipp: GeoPoint,
    pub mag_lat_deg: f64,
    pub mag_lon_deg: f64,
    pub local_solar_time_h: f64,
}

impl LosLink {
    /// Builds a link from look angles, deriving the pierce point and the
    /// ephemeris-side quantities.
    pub fn from_look_angles(
        station: &Station,
        satellite_id: Arc<str>,
        azimuth_deg: f64,
        elevation_deg: f64,
        t: TimeStamp,
        pole: MagneticPole,
    ) -> Result<Self> {
        let ipp = ipp_from_los(
            station.position,
            station.height_km,
            azimuth_deg,
            elevation_deg,
            SHELL_HEIGHT_KM,
        )?;
        let (mag_lat_deg, mag_lon_deg) = dipole_mag_coords(ipp.point, pole);
        Ok(Self {
            station_id: station.id.clone(),
            satellite_id,
            elevation_deg,
            azimuth_deg,
            ipp: ipp.point,
            mag_lat_deg,
            mag_lon_deg,
            local_solar_time_h: local_solar_time_h(ipp.point.lon_deg, t),
        })
    }
}

/// Every station-satellite pair at or above the elevation mask at `t`,
/// ordered by `(station_id, satellite_id)`.
pub fn visible_links(
    stations: &[Station],
    tracks: &[SatelliteTrack],
    t: TimeStamp,
    elevation_mask_deg: f64,
    pole: MagneticPole,
) -> Vec<LosLink> {
    let mut out = Vec::new();
    for sat in tracks {
        let Some(pos) = sat.position(t) else { continue };
        for st in stations {
            let (az, el) = look_angles(st, pos);
            if el >= elevation_mask_deg && el > 0.0 {
                if let Ok(link) =
                    LosLink::from_look_angles(st, sat.satellite_id().clone(), az, el.min(90.0), t, pole)
                {
                    out.push(link);
                }
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.station_id, &a.satellite_id).cmp(&(&b.station_id, &b.satellite_id))
    });
    out
}

/// Link sets at `t + k * step_s` for `k = 1..=horizon_steps`.
pub fn forecast_schedule(
    stations: &[Station],
    tracks: &[SatelliteTrack],
    t: TimeStamp,
    horizon_steps: usize,
    step_s: i64,
    elevation_mask_deg: f64,
    pole: MagneticPole,
) -> Vec<Vec<LosLink>> {
    (1..=horizon_steps as i64)
        .map(|k| visible_links(stations, tracks, t.offset(k * step_s), elevation_mask_deg, pole))
        .collect()
}

/// Walker-delta layout of one synthetic constellation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstellationConfig {
    pub tag: char,
    pub planes: usize,
    pub per_plane: usize,
    pub semi_major_axis_km: f64,
    pub inclination_deg: f64,
    #[serde(default)]
    pub raan_offset_deg: f64,
    #[serde(default = "default_phasing")]
    pub phasing: usize,
}

fn default_phasing() -> usize {
    1
}

impl ConstellationConfig {
    pub fn build(&self) -> Result<Vec<OrbitElements>> {
        let total = self.planes * self.per_plane;
        let mut out = Vec::with_capacity(total);
        for p in 0..self.planes {
            let raan = self.raan_offset_deg + 360.0 * p as f64 / self.planes as f64;
            for s in 0..self.per_plane {
                let u = 360.0 * s as f64 / self.per_plane as f64
                    + 360.0 * (self.phasing * p) as f64 / total as f64;
                let id = format!("{}{:02}", self.tag, p * self.per_plane + s + 1);
                out.push(OrbitElements::new(
                    &id,
                    self.semi_major_axis_km,
                    self.inclination_deg,
                    raan,
                    u,
                )?);
            }
        }
        Ok(out)
    }
}
