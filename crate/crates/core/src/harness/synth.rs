//! Synthetic transaction streams with planted fraud behavior.
//!
//! Normal accounts live in communities and transact with a few friends at
//! Poisson times during the day. Fraud accounts come in three kinds:
//! `Burst` accounts have short lifetimes and spray skewed amounts to fresh
//! addresses in bursts; `Structural` accounts look normal transaction by
//! transaction but pay fresh addresses and collect from scattered victims;
//! `Nocturnal` accounts keep a normal friend graph but trade at night, and
//! more often than their peers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::rng;
use crate::txcorpus::{Address, Direction, TransactionRecord};

const DAY: f64 = 86_400.0;
const FRESH_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BehaviorParams {
    /// Outgoing transactions per day while active.
    pub rate_per_day: f64,
    /// Probability that an outgoing event is a burst of several transfers.
    pub burstiness: f64,
    /// Distinct counterparties (friends for normal accounts, fresh addresses per burst for fraud).
    pub fan_out: usize,
    pub lifetime_days: [f64; 2],
    /// Log-normal amount parameters (ETH).
    pub amount_mu: f64,
    pub amount_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_accounts: usize,
    pub fraud_fraction: f64,
    pub horizon_days: f64,
    pub start_timestamp: i64,
    pub communities: usize,
    pub normal: BehaviorParams,
    pub fraud: BehaviorParams,
    /// Shares of the `Structural` and `Nocturnal` kinds among fraud accounts.
    pub structural_share: f64,
    pub nocturnal_share: f64,
    /// Incoming victim transfers per fraud account.
    pub victims: [usize; 2],
}

impl Default for BehaviorParams {
    fn default() -> Self {
        Self { rate_per_day: 0.05, burstiness: 0.0, fan_out: 4, lifetime_days: [150.0, 365.0], amount_mu: 0.0, amount_sigma: 1.0 }
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_accounts: 2000,
            fraud_fraction: 0.1,
            horizon_days: 365.0,
            start_timestamp: 1_600_000_000,
            communities: 20,
            normal: BehaviorParams::default(),
            fraud: BehaviorParams {
                rate_per_day: 0.6,
                burstiness: 0.7,
                fan_out: 5,
                lifetime_days: [5.0, 30.0],
                amount_mu: 1.5,
                amount_sigma: 1.8,
            },
            structural_share: 0.3,
            nocturnal_share: 0.3,
            victims: [3, 8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccountKind {
    Normal,
    Burst,
    Structural,
    Nocturnal,
}

impl AccountKind {
    pub fn label(self) -> u8 {
        u8::from(self != AccountKind::Normal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    /// Sender-view transfers sorted by `(timestamp, sender, receiver)`.
    pub transfers: Vec<TransactionRecord>,
    pub labels: BTreeMap<Address, u8>,
    pub kinds: BTreeMap<Address, AccountKind>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if !(self.fraud_fraction > 0.0 && self.fraud_fraction < 1.0) {
            return bad(format!("fraud fraction must be in (0, 1), got {}", self.fraud_fraction));
        }
        if !(self.horizon_days > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon_days));
        }
        if self.n_accounts < 2 || self.communities == 0 {
            return bad("need at least two accounts and one community".into());
        }
        for (name, b) in [("normal", &self.normal), ("fraud", &self.fraud)] {
            if !(b.rate_per_day > 0.0) {
                return bad(format!("{name} transaction rate must be positive"));
            }
            if b.fan_out == 0 {
                return bad(format!("{name} fan-out must be positive"));
            }
            if !(b.lifetime_days[0] > 0.0 && b.lifetime_days[0] <= b.lifetime_days[1]) {
                return bad(format!("{name} lifetime range {:?} is invalid", b.lifetime_days));
            }
            if !(0.0..=1.0).contains(&b.burstiness) || !(b.amount_sigma > 0.0) {
                return bad(format!("{name} burstiness or amount spread out of range"));
            }
        }
        if self.structural_share < 0.0 || self.nocturnal_share < 0.0 || self.structural_share + self.nocturnal_share > 1.0 {
            return bad("fraud kind shares must be non-negative and sum to at most 1".into());
        }
        if self.victims[0] > self.victims[1] {
            return bad("victim range is inverted".into());
        }
        Ok(())
    }

    pub fn n_fraud(&self) -> usize {
        (self.n_accounts as f64 * self.fraud_fraction).round() as usize
    }
}

fn day_hour<R: Rng>(r: &mut R) -> f64 {
    if r.gen_bool(0.97) {
        r.gen_range(8.0..23.0)
    } else {
        r.gen_range(0.0..24.0)
    }
}

fn night_hour<R: Rng>(r: &mut R) -> f64 {
    if r.gen_bool(0.95) {
        r.gen_range(0.0..6.0)
    } else {
        day_hour(r)
    }
}

/// Event days of a Poisson process over `[start, start + life)`; at least one.
fn poisson_days<R: Rng>(r: &mut R, rate: f64, start: f64, life: f64) -> Vec<f64> {
    let n = Poisson::new(rate * life).map(|p| p.sample(r) as usize).unwrap_or(0).max(1);
    let mut days: Vec<f64> = (0..n).map(|_| start + r.gen_range(0.0..life)).collect();
    days.sort_by(f64::total_cmp);
    days
}

fn at(spec: &SyntheticSpec, day: f64, hour: f64) -> i64 {
    spec.start_timestamp + (day.floor() * DAY + hour * 3600.0) as i64
}

/// Generates accounts, transfers and labels. Account `i` has address
/// `Address::from_index(i + 1)`; fresh counterparties live above `2^32`.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64) -> Result<Synthetic, HarnessError> {
    spec.validate()?;
    let mut r = rng::stream(seed, "synth");
    let n = spec.n_accounts;
    let n_fraud = spec.n_fraud();
    if n_fraud == 0 || n_fraud == n {
        return Err(HarnessError::Spec(format!("{n} accounts at fraction {} leave a class empty", spec.fraud_fraction)));
    }
    let n_struct = (n_fraud as f64 * spec.structural_share).round() as usize;
    let n_noct = ((n_fraud as f64 * spec.nocturnal_share).round() as usize).min(n_fraud - n_struct);
    let mut kinds = vec![AccountKind::Normal; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    for (j, &i) in order[..n_fraud].iter().enumerate() {
        kinds[i] = if j < n_struct {
            AccountKind::Structural
        } else if j < n_struct + n_noct {
            AccountKind::Nocturnal
        } else {
            AccountKind::Burst
        };
    }
    let community: Vec<usize> = (0..n).map(|i| i % spec.communities).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.communities];
    for i in 0..n {
        if kinds[i] == AccountKind::Normal || kinds[i] == AccountKind::Nocturnal {
            members[community[i]].push(i);
        }
    }
    let normals: Vec<usize> = (0..n).filter(|&i| kinds[i] == AccountKind::Normal).collect();
    let addr = |i: usize| Address::from_index(i as u64 + 1);
    let mut fresh = FRESH_BASE;
    let mut transfers = Vec::new();
    let mut push = |from: Address, to: Address, value: f64, ts: i64| {
        transfers.push(TransactionRecord { sender: from, receiver: to, value, direction: Direction::Out, timestamp: ts });
    };

    let horizon = spec.horizon_days;
    for i in 0..n {
        let kind = kinds[i];
        let b = if kind == AccountKind::Burst { &spec.fraud } else { &spec.normal };
        let mut life = r.gen_range(b.lifetime_days[0]..=b.lifetime_days[1]).min(horizon);
        if kind == AccountKind::Structural {
            // moderately short-lived, otherwise ordinary rhythm
            life = life.min(r.gen_range(60.0..150.0));
        }
        let start = r.gen_range(0.0..(horizon - life).max(0.0) + f64::EPSILON);
        let amounts = LogNormal::new(b.amount_mu, b.amount_sigma).map_err(|e| HarnessError::Spec(e.to_string()))?;
        let friends: Vec<usize> = match kind {
            AccountKind::Normal | AccountKind::Nocturnal => {
                let pool: Vec<usize> = members[community[i]].iter().copied().filter(|&j| j != i).collect();
                pool.choose_multiple(&mut r, b.fan_out.min(pool.len())).copied().collect()
            }
            _ => Vec::new(),
        };
        let rate = if kind == AccountKind::Nocturnal { 2.0 * b.rate_per_day } else { b.rate_per_day };
        for day in poisson_days(&mut r, rate, start, life) {
            let hour = match kind {
                AccountKind::Nocturnal => night_hour(&mut r),
                AccountKind::Burst => r.gen_range(0.0..24.0),
                _ => day_hour(&mut r),
            };
            let burst = if r.gen_bool(b.burstiness) { r.gen_range(3..=3 + b.fan_out) } else { 1 };
            let mut ts = at(spec, day, hour);
            for _ in 0..burst {
                let to = if friends.is_empty() {
                    fresh += 1;
                    Address::from_index(fresh)
                } else {
                    addr(friends[r.gen_range(0..friends.len())])
                };
                push(addr(i), to, amounts.sample(&mut r), ts);
                ts += r.gen_range(20..600);
            }
        }
        if kind == AccountKind::Burst || kind == AccountKind::Structural {
            let k = r.gen_range(spec.victims[0]..=spec.victims[1]);
            let gaps = Exp::<f64>::new(1.0).map_err(|e| HarnessError::Spec(e.to_string()))?;
            for _ in 0..k {
                let v = normals[r.gen_range(0..normals.len())];
                let day = start + (gaps.sample(&mut r) / 3.0).min(0.9) * life;
                let value = LogNormal::new(spec.normal.amount_mu, spec.normal.amount_sigma).map_err(|e| HarnessError::Spec(e.to_string()))?;
                push(addr(v), addr(i), value.sample(&mut r), at(spec, day, day_hour(&mut r)));
            }
        }
    }
    transfers.sort_by(|a, b| (a.timestamp, &a.sender, &a.receiver).cmp(&(b.timestamp, &b.sender, &b.receiver)));
    let labels = (0..n).map(|i| (addr(i), kinds[i].label())).collect();
    let kinds = (0..n).map(|i| (addr(i), kinds[i])).collect();
    Ok(Synthetic { transfers, labels, kinds })
}
