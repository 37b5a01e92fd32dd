//! Maximum-search reconstruction: the strongest PADP bin of every scanning
//! direction, mapped at that direction without refinement.

use crate::geometry::{map_delay_angle, MapPoint};
use crate::padp::Padp;
use crate::scalar::Real;
use crate::scene::Point2;

/// One point per column whose peak exceeds `noise_floor + margin_db`.
/// Ties between bins go to the shorter delay.
pub fn max_search<T: Real>(padp: &Padp<T>, margin_db: T, trx: Point2<T>, radius_m: T, trx_id: usize) -> Vec<MapPoint<T>> {
    let threshold = padp.noise_floor_db + margin_db;
    (0..padp.n_angles())
        .filter_map(|j| {
            let (i, p) = (0..padp.n_delay())
                .map(|i| (i, padp.get(i, j)))
                .fold((0, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
            (p > threshold).then(|| {
                map_delay_angle(padp.delay_grid_s[i], padp.angle_grid_deg[j], 0, trx, radius_m, trx_id)
            })
        })
        .collect()
}
