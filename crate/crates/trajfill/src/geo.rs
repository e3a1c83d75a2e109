//! Geographic primitives: WGS84 points and the local flat projection used to
//! turn city-scale coordinates into meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per degree of latitude on a 6371 km sphere; longitude scales by
/// cos(latitude). At city scale (tens of km) the distortion is negligible.
pub const M_PER_DEG: f64 = 6_371_000.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::data(format!("latitude {} out of [-90, 90]", self.lat)));
        }
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::data(format!("longitude {} out of [-180, 180]", self.lon)));
        }
        Ok(())
    }
}

/// Equirectangular projection anchored at a south-west origin. `x` is meters
/// east of the origin, `y` meters north; the longitude scale is fixed at the
/// reference latitude so the mapping is exactly invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    origin: GeoPoint,
    m_per_deg_lon: f64,
}

impl Projection {
    pub fn new(origin: GeoPoint, ref_lat: f64) -> Self {
        Projection {
            origin,
            m_per_deg_lon: M_PER_DEG * ref_lat.to_radians().cos(),
        }
    }

    /// Projection spanning a bbox, anchored at its south-west corner with the
    /// longitude scale taken at the mid latitude.
    pub fn for_bbox(sw: GeoPoint, ne: GeoPoint) -> Self {
        Projection::new(sw, 0.5 * (sw.lat + ne.lat))
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn to_meters(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.m_per_deg_lon,
            (p.lat - self.origin.lat) * M_PER_DEG,
        )
    }

    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + y / M_PER_DEG,
            lon: self.origin.lon + x / self.m_per_deg_lon,
        }
    }

    /// Straight-line meters between two points under this projection.
    pub fn distance_m(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        let (ax, ay) = self.to_meters(a);
        let (bx, by) = self.to_meters(b);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_out_of_range() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 181.0).is_err());
        assert!(GeoPoint::new(0.3, 32.6).is_ok());
    }

    #[test]
    fn projection_round_trips() {
        let sw = GeoPoint { lat: 0.25, lon: 32.50 };
        let ne = GeoPoint { lat: 0.40, lon: 32.65 };
        let proj = Projection::for_bbox(sw, ne);
        let p = GeoPoint { lat: 0.3123, lon: 32.5789 };
        let (x, y) = proj.to_meters(p);
        let back = proj.to_geo(x, y);
        assert!((back.lat - p.lat).abs() < 1e-12);
        assert!((back.lon - p.lon).abs() < 1e-12);
    }

    #[test]
    fn one_degree_of_latitude_is_about_111_km() {
        let proj = Projection::new(GeoPoint { lat: 0.0, lon: 0.0 }, 0.0);
        let (_, y) = proj.to_meters(GeoPoint { lat: 1.0, lon: 0.0 });
        assert!((y - 111_194.926).abs() < 1.0);
    }
}
