// Annuity prices over time with the interest rate frozen at its first-week level.

use implied_longevity::pricing::{annuity_factor_general, AnnuityContract, PricingConfig};
use implied_longevity::{CirCurve, CirParams, MortalityTrend};

fn female() -> (MortalityTrend, CirParams) {
    (MortalityTrend::new(6.724e-10, 91.68, 8.201e-4, 9.174, 1.467e-3), CirParams::new(1.804e-3, 7.210e-3, 4.093e-2).unwrap())
}

fn male() -> (MortalityTrend, CirParams) {
    (MortalityTrend::new(2.376e-10, 88.13, 3.061e-3, 10.37, 1.127e-3), CirParams::new(1.731e-3, 3.731e-3, 4.341e-2).unwrap())
}

fn price(model: &(MortalityTrend, CirParams), age: f64, week: f64, r0: f64) -> f64 {
    let curve = CirCurve::new(model.1, r0).unwrap();
    annuity_factor_general(&AnnuityContract::new(age, 0.0, week), &model.0, &curve, &PricingConfig::default()).unwrap()
}

// Spot rate at which the age-65 male price in the first week is 12.73.
fn anchor_rate() -> f64 {
    let m = male();
    let (mut lo, mut hi) = (0.0, 0.2);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if price(&m, 65.0, 0.0, mid) > 12.73 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn published_grid() {
    let r0 = anchor_rate();
    // weeks of September 2004, November 2013, January 2020
    let weeks = [0.0, 477.0, 798.0];
    let printed = [
        [16.42, 15.44, 13.87, 12.73, 10.56, 9.47],
        [16.39, 15.71, 13.93, 13.15, 10.76, 10.05],
        [16.38, 15.88, 13.97, 13.42, 10.89, 10.42],
    ];
    let (f, m) = (female(), male());
    let mut worst: f64 = 0.0;
    for (row, &z) in weeks.iter().enumerate() {
        for (col, &age) in [55.0, 65.0, 75.0].iter().enumerate() {
            let pf = price(&f, age, z, r0);
            let pm = price(&m, age, z, r0);
            println!("week {z} age {age}: female {pf:.3} ({}) male {pm:.3} ({})", printed[row][2 * col], printed[row][2 * col + 1]);
            worst = worst.max((pf - printed[row][2 * col]).abs()).max((pm - printed[row][2 * col + 1]).abs());
        }
    }
    println!("r0 {r0:.6} worst {worst:.3}");
    assert!(worst < 0.02, "worst gap {worst}");
}

#[test]
fn frozen_rate_prices_rise_for_men() {
    let r0 = anchor_rate();
    let m = male();
    for age in [55.0, 65.0, 75.0] {
        let p: Vec<f64> = [0.0, 477.0, 798.0].iter().map(|&z| price(&m, age, z, r0)).collect();
        assert!(p[0] < p[1] && p[1] < p[2], "age {age}: {p:?}");
    }
    let ratio = price(&m, 65.0, 477.0, r0) / price(&m, 65.0, 0.0, r0);
    assert!((ratio - 1.033).abs() < 0.001, "{ratio}");
}
