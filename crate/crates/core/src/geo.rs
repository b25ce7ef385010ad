//! Spherical geometry, time encodings and coordinate transforms.
//!
//! Angles cross every public interface in degrees and are converted to
//! radians internally. The Earth is a sphere of radius [`EARTH_RADIUS_KM`].

use std::f64::consts::{PI, TAU};

use chrono::{DateTime, Datelike, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const SHELL_HEIGHT_KM: f64 = 450.0;
pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DAYS_PER_YEAR: f64 = 365.25;

/// Radius of the thin ionospheric shell.
pub fn shell_radius_km() -> f64 {
    EARTH_RADIUS_KM + SHELL_HEIGHT_KM
}

/// Wraps a longitude into `[-180, 180)`.
pub fn wrap_lon_deg(lon: f64) -> f64 {
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can return exactly 360.0 - 180.0 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl GeoPoint {
    /// Builds a point, normalizing the longitude. Latitudes outside
    /// `[-90, 90]` are rejected.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat_deg) || !lon_deg.is_finite() {
            return Err(Error::InvalidCoordinate { lat_deg, lon_deg });
        }
        Ok(Self {
            lat_deg,
            lon_deg: wrap_lon_deg(lon_deg),
        })
    }

    fn unit_vector(&self) -> [f64; 3] {
        let (phi, lam) = (self.lat_deg.to_radians(), self.lon_deg.to_radians());
        [phi.cos() * lam.cos(), phi.cos() * lam.sin(), phi.sin()]
    }

    fn from_unit_vector(v: [f64; 3]) -> Self {
        let lat = v[2].clamp(-1.0, 1.0).asin().to_degrees();
        let lon = v[1].atan2(v[0]).to_degrees();
        Self {
            lat_deg: lat,
            lon_deg: wrap_lon_deg(lon),
        }
    }

    /// Earth-fixed Cartesian position at the given geocentric radius.
    pub fn to_ecef(&self, radius_km: f64) -> [f64; 3] {
        let u = self.unit_vector();
        [u[0] * radius_km, u[1] * radius_km, u[2] * radius_km]
    }
}

/// Seconds since the Unix epoch. Cadence alignment is a property of the
/// context that produced the value (30 s raw, 300 s model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimeStamp(pub i64);

impl TimeStamp {
    pub fn seconds(self) -> i64 {
        self.0
    }

    pub fn offset(self, seconds: i64) -> Self {
        TimeStamp(self.0 + seconds)
    }

    pub fn is_aligned(self, cadence_s: i64) -> bool {
        self.0.rem_euclid(cadence_s) == 0
    }

    pub fn utc_hours(self) -> f64 {
        self.0.rem_euclid(SECONDS_PER_DAY) as f64 / 3600.0
    }

    /// Fractional day of year, zero at 00:00 UTC on January 1st.
    pub fn day_of_year(self) -> f64 {
        match DateTime::from_timestamp(self.0, 0) {
            Some(dt) => {
                let secs = dt.num_seconds_from_midnight() as f64;
                (dt.ordinal0() as f64) + secs / SECONDS_PER_DAY as f64
            }
            None => 0.0,
        }
    }
}

/// North pole of the centered tilted dipole used as the magnetic frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagneticPole {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl Default for MagneticPole {
    /// IGRF-13 dipole north pole, epoch 2020.0.
    fn default() -> Self {
        Self {
            lat_deg: 80.65,
            lon_deg: -72.68,
        }
    }
}

/// Great-circle distance on a sphere of the given radius.
pub fn haversine_km(a: GeoPoint, b: GeoPoint, radius_km: f64) -> f64 {
    let (p1, p2) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * radius_km * h.sqrt().min(1.0).asin()
}

/// Pierce point of a line of sight with the thin shell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiercePoint {
    pub point: GeoPoint,
    pub elevation_deg: f64,
}

/// Intersects the line of sight leaving `receiver` (at `receiver_height_km`
/// above the sphere) with the shell at `shell_height_km`.
pub fn ipp_from_los(
    receiver: GeoPoint,
    receiver_height_km: f64,
    azimuth_deg: f64,
    elevation_deg: f64,
    shell_height_km: f64,
) -> Result<PiercePoint> {
    if !(elevation_deg > 0.0 && elevation_deg <= 90.0) {
        return Err(Error::BelowHorizon { elevation_deg });
    }
    let el = elevation_deg.to_radians();
    let az = azimuth_deg.to_radians();
    let r_rx = EARTH_RADIUS_KM + receiver_height_km;
    let r_shell = EARTH_RADIUS_KM + shell_height_km;
    let psi = PI / 2.0 - el - (r_rx * el.cos() / r_shell).asin();
    let phi = receiver.lat_deg.to_radians();
    let lam = receiver.lon_deg.to_radians();
    let sin_lat = phi.sin() * psi.cos() + phi.cos() * psi.sin() * az.cos();
    let lat = sin_lat.clamp(-1.0, 1.0).asin();
    let dlam = (az.sin() * psi.sin() * phi.cos()).atan2(psi.cos() - phi.sin() * sin_lat);
    Ok(PiercePoint {
        point: GeoPoint {
            lat_deg: lat.to_degrees(),
            lon_deg: wrap_lon_deg((lam + dlam).to_degrees()),
        },
        elevation_deg,
    })
}

/// Local solar time in hours, `[0, 24)`.
pub fn local_solar_time_h(lon_deg: f64, t: TimeStamp) -> f64 {
    let h = (t.utc_hours() + lon_deg / 15.0).rem_euclid(24.0);
    if h >= 24.0 {
        0.0
    } else {
        h
    }
}

/// Angular separation of two local solar times, in degrees `[0, 180]`.
pub fn lst_angular_sep_deg(lst_a_h: f64, lst_b_h: f64) -> f64 {
    let d = (lst_a_h - lst_b_h).abs().rem_euclid(24.0);
    d.min(24.0 - d) * 15.0
}

/// Cyclical `(sin, cos)` encoding of `value` with the given period.
pub fn cyc_encode(value: f64, period: f64) -> (f64, f64) {
    let angle = TAU * value / period;
    angle.sin_cos()
}

fn pole_rotation(pole: MagneticPole) -> [[f64; 3]; 3] {
    let (sl, cl) = pole.lon_deg.to_radians().sin_cos();
    let colat = (90.0 - pole.lat_deg).to_radians();
    let (st, ct) = colat.sin_cos();
    // R_y(-colat) * R_z(-pole_lon)
    [
        [ct * cl, ct * sl, -st],
        [-sl, cl, 0.0],
        [st * cl, st * sl, ct],
    ]
}

fn apply(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn apply_transposed(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Magnetic `(lat, lon)` of `p` in the centered-dipole frame of `pole`.
/// Magnetic longitude zero lies on the pole's own geographic meridian.
pub fn dipole_mag_coords(p: GeoPoint, pole: MagneticPole) -> (f64, f64) {
    let m = GeoPoint::from_unit_vector(apply(&pole_rotation(pole), p.unit_vector()));
    (m.lat_deg, m.lon_deg)
}

/// Inverse of [`dipole_mag_coords`].
pub fn dipole_to_geographic(mag_lat_deg: f64, mag_lon_deg: f64, pole: MagneticPole) -> GeoPoint {
    let m = GeoPoint {
        lat_deg: mag_lat_deg,
        lon_deg: mag_lon_deg,
    };
    GeoPoint::from_unit_vector(apply_transposed(&pole_rotation(pole), m.unit_vector()))
}
