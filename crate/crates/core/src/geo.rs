//! Great-circle distances and the local planar projection used for
//! cell geometry.

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = EARTH_RADIUS_KM * 1000.0;

/// Great-circle distance in kilometers between two WGS84 points.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let lat1r = lat1.to_radians();
    let lat2r = lat2.to_radians();
    let dlat = (lat2 - lat1).to_radians();
    let dlon = (lon2 - lon1).to_radians();

    let a = (dlat / 2.0).sin().powi(2)
        + lat1r.cos() * lat2r.cos() * (dlon / 2.0).sin().powi(2);
    let c = 2.0 * a.sqrt().atan2((1.0 - a).sqrt());
    EARTH_RADIUS_KM * c
}

/// Local equirectangular projection anchored at a reference point.
///
/// Within a city-scale region the distortion is negligible and, unlike
/// geodesic math, the projection gives exact shared edges between
/// adjacent grid cells.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalProjection {
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Latitude whose cosine fixes the meters-per-degree-longitude scale.
    pub ref_lat: f64,
}

impl LocalProjection {
    pub fn new(origin_lon: f64, origin_lat: f64, ref_lat: f64) -> Self {
        Self { origin_lon, origin_lat, ref_lat }
    }

    pub fn meters_per_deg_lat(&self) -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    pub fn meters_per_deg_lon(&self) -> f64 {
        self.meters_per_deg_lat() * self.ref_lat.to_radians().cos()
    }

    /// (x east, y north) in meters relative to the origin.
    pub fn to_meters(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.meters_per_deg_lon(),
            (lat - self.origin_lat) * self.meters_per_deg_lat(),
        )
    }

    pub fn to_lonlat(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin_lon + x / self.meters_per_deg_lon(),
            self.origin_lat + y / self.meters_per_deg_lat(),
        )
    }
}

/// Compass bearing of the vector (dx east, dy north), in degrees
/// clockwise from north, normalized to [0, 360).
pub fn bearing_deg(dx: f64, dy: f64) -> f64 {
    let b = dx.atan2(dy).to_degrees();
    let b = b % 360.0;
    if b < 0.0 {
        b + 360.0
    } else {
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn haversine_zero_for_identical_points() {
        assert_eq!(haversine_km(-8.61, 41.15, -8.61, 41.15), 0.0);
    }

    #[test]
    fn one_degree_along_equator() {
        // arc length = R * pi/180
        let expected = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert_relative_eq!(haversine_km(0.0, 0.0, 1.0, 0.0), expected, max_relative = 1e-12);
        assert_relative_eq!(haversine_km(0.0, 0.0, 1.0, 0.0), 111.195, max_relative = 1e-5);
    }

    #[test]
    fn collinear_equator_hops_are_additive() {
        let whole = haversine_km(0.0, 0.0, 1.0, 0.0);
        let halves = haversine_km(0.0, 0.0, 0.5, 0.0) + haversine_km(0.5, 0.0, 1.0, 0.0);
        assert_relative_eq!(whole, halves, max_relative = 1e-12);
    }

    #[test]
    fn bearing_cardinal_directions() {
        assert_relative_eq!(bearing_deg(0.0, 1.0), 0.0);
        assert_relative_eq!(bearing_deg(1.0, 0.0), 90.0);
        assert_relative_eq!(bearing_deg(0.0, -1.0), 180.0);
        assert_relative_eq!(bearing_deg(-1.0, 0.0), 270.0);
    }

    #[test]
    fn projection_round_trip() {
        let proj = LocalProjection::new(-8.7, 41.1, 41.18);
        let (x, y) = proj.to_meters(-8.6123, 41.1577);
        let (lon, lat) = proj.to_lonlat(x, y);
        assert_relative_eq!(lon, -8.6123, max_relative = 1e-12);
        assert_relative_eq!(lat, 41.1577, max_relative = 1e-12);
    }
}
