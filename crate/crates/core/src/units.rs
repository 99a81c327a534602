//! Unit conversions between the SI values used internally and the traffic
//! engineering units (km/h, veh/km, veh/h) used in files and on the CLI.

pub const KMH: f64 = 1.0 / 3.6;
pub const VEH_PER_KM: f64 = 1.0e-3;
pub const VEH_PER_H: f64 = 1.0 / 3600.0;

#[inline]
pub fn kmh_to_ms(v: f64) -> f64 {
    v * KMH
}

#[inline]
pub fn ms_to_kmh(v: f64) -> f64 {
    v / KMH
}

#[inline]
pub fn per_km_to_per_m(rho: f64) -> f64 {
    rho * VEH_PER_KM
}

#[inline]
pub fn per_m_to_per_km(rho: f64) -> f64 {
    rho / VEH_PER_KM
}

#[inline]
pub fn per_h_to_per_s(q: f64) -> f64 {
    q * VEH_PER_H
}

#[inline]
pub fn per_s_to_per_h(q: f64) -> f64 {
    q / VEH_PER_H
}
