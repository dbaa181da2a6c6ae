//! Sealed-bid, single-round tenders.

use serde::{Deserialize, Serialize};

use super::schedule::{cost_at, CostSchedule};
use crate::fabric::ResourceId;
use crate::money::Money;
use crate::time::{SimDuration, SimTime, TimeOfDay};

/// An owner's offer: a rate for some number of concurrent slots, valid over a
/// window of simulation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub resource_id: ResourceId,
    /// Money per cpu-hour.
    pub rate: Money,
    pub capacity: u32,
    pub valid_from: SimTime,
    pub valid_until: SimTime,
}

impl Bid {
    pub fn is_valid(&self) -> bool {
        self.rate.is_positive() && self.capacity >= 1 && self.valid_from <= self.valid_until
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenderRequest {
    pub slots: u32,
    /// How long accepted rates stay pinned.
    pub window: SimDuration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedBid {
    pub bid: Bid,
    pub slots: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenderOutcome {
    pub accepted: Vec<AcceptedBid>,
    /// True when the bids did not cover the requested slots.
    pub partial: bool,
}

impl TenderOutcome {
    pub fn slots(&self) -> u32 {
        self.accepted.iter().map(|a| a.slots).sum()
    }

    /// Σ slots × rate over accepted bids.
    pub fn slot_cost(&self) -> Money {
        self.accepted.iter().map(|a| a.bid.rate * a.slots as u64).sum()
    }

    /// The pinned rate for `resource`, if it won and `t` is inside the window.
    pub fn pinned_rate(&self, resource: &ResourceId, t: SimTime) -> Option<Money> {
        self.accepted
            .iter()
            .find(|a| &a.bid.resource_id == resource && a.bid.valid_from <= t && t <= a.bid.valid_until)
            .map(|a| a.bid.rate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TenderError {
    #[error("no capacity offered")]
    NoCapacity,
    #[error("tender must request at least one slot")]
    NothingRequested,
}

/// An owner's bid under the markup strategy: the current scheduled rate for
/// `user` times `markup`, offering every slot for `window`.
#[allow(clippy::too_many_arguments)]
pub fn owner_bid(
    resource_id: &ResourceId,
    schedule: &CostSchedule,
    user: &str,
    now: SimTime,
    time_of_day: TimeOfDay,
    slots: u32,
    markup: f64,
    window: SimDuration,
) -> Bid {
    let rate = cost_at(schedule, user, time_of_day).scale(markup).max(Money::from_cents(1));
    Bid { resource_id: resource_id.clone(), rate, capacity: slots.max(1), valid_from: now, valid_until: now + window }
}

/// Accepts bids cheapest-first (ties by resource id) until the requested slots
/// are covered; the last accepted bid may be taken partially.
pub fn run_tender(request: &TenderRequest, bids: &[Bid]) -> Result<TenderOutcome, TenderError> {
    if request.slots == 0 {
        return Err(TenderError::NothingRequested);
    }
    let mut sorted: Vec<&Bid> = bids.iter().filter(|b| b.is_valid()).collect();
    if sorted.is_empty() {
        return Err(TenderError::NoCapacity);
    }
    sorted.sort_by(|a, b| a.rate.cmp(&b.rate).then_with(|| a.resource_id.cmp(&b.resource_id)));
    let mut left = request.slots;
    let mut accepted = Vec::new();
    for bid in sorted {
        if left == 0 {
            break;
        }
        let take = bid.capacity.min(left);
        left -= take;
        accepted.push(AcceptedBid { bid: bid.clone(), slots: take });
    }
    Ok(TenderOutcome { accepted, partial: left > 0 })
}
