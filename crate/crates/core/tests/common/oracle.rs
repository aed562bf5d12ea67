//! Brute-force capacity oracle shared by the test targets.

use gms_core::domain::{Configuration, CLASS_STEP, MAX_CAPACITY};

/// Part lots of [`CLASS_STEP`] parts keep the enumeration below small.
const LOT: u32 = CLASS_STEP;

/// Every way of loading the units of one operation in one hour: each unit
/// takes between zero and its rate in lots. Returns the best total load.
fn best_operation_load(units: &[u32]) -> u32 {
    let mut best = 0;
    let mut loads = vec![0u32; units.len()];
    loop {
        best = best.max(loads.iter().sum::<u32>());
        let mut k = 0;
        loop {
            if k == loads.len() {
                return best;
            }
            if loads[k] < units[k] {
                loads[k] += 1;
                break;
            }
            loads[k] = 0;
            k += 1;
        }
    }
}

/// Brute-force schedule oracle: a part needs every operation once, so the
/// hourly output is the largest lot count every operation can absorb.
/// Enumerates candidate outputs and checks feasibility per operation.
pub fn oracle_capacity(config: &Configuration, rates: &[u32]) -> u32 {
    let mut per_op = Vec::new();
    for (i, &rate) in rates.iter().enumerate() {
        assert_eq!(rate % LOT, 0);
        let units: Vec<u32> = (0..config.stations())
            .flat_map(|j| std::iter::repeat(rate / LOT).take(config.get(i, j) as usize))
            .collect();
        per_op.push(best_operation_load(&units));
    }
    let cap_lots = MAX_CAPACITY / LOT;
    let mut output = 0;
    for lots in 0..=cap_lots {
        if per_op.iter().all(|&load| load >= lots) {
            output = lots;
        }
    }
    output * LOT
}

/// Rate sets the exhaustive check runs under.
pub const RATE_SETS: [&[u32]; 4] = [&[30, 60], &[60, 120], &[120, 30], &[30, 0]];

/// All 81 configurations of two types on two stations with at most two units per cell.
pub fn two_by_two() -> impl Iterator<Item = Configuration> {
    (0..81u32).map(|code| {
        let counts: Vec<u32> = (0..4).map(|k| (code / 3u32.pow(k)) % 3).collect();
        Configuration::from_counts(2, 2, counts).unwrap()
    })
}
