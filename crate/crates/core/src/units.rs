//! Scale conversions shared by every module.
//!
//! Path losses and powers cross module boundaries in dB (files, CLI) but the
//! optimisation works in natural-log units, so `db_to_nat` / `nat_to_db` are
//! the only conversions the solvers ever see.

use std::f64::consts::LN_10;

/// Multiplier taking a dB quantity to natural-log scale.
pub const DB_TO_NAT: f64 = LN_10 / 10.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

pub fn db_to_nat(db: f64) -> f64 {
    db * DB_TO_NAT
}

pub fn nat_to_db(nat: f64) -> f64 {
    nat / DB_TO_NAT
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    linear_to_db(watts) + 30.0
}

/// Thermal noise over one 180 kHz resource block at -174 dBm/Hz plus a
/// 5 dB receiver noise figure.
pub fn default_noise_dbm_per_rb() -> f64 {
    -174.0 + 10.0 * 180e3f64.log10() + 5.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_floor_per_rb() {
        let n0 = default_noise_dbm_per_rb();
        assert!((n0 - (-116.447)).abs() < 1e-3, "{n0}");
        let w = dbm_to_watts(n0);
        assert!((w / 2.265e-15 - 1.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn dbm_round_trip() {
        assert!((watts_to_dbm(40.0) - 46.0206).abs() < 1e-4);
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nat_scale_round_trip_is_tight() {
        for &db in &[-140.0, -3.5, 0.0, 0.01, 100.5, 187.33] {
            let back = nat_to_db(db_to_nat(db));
            assert!((back - db).abs() <= 1e-12 * db.abs().max(1.0));
        }
    }
}
