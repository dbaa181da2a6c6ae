use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::fabric::ResourceId;
use crate::money::Money;
use crate::plan::JobId;
use crate::time::SimTime;

/// One charge: money actually owed for an attempt's cpu time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Journal sequence number of the record that committed this charge.
    pub seq: u64,
    pub t_sim: SimTime,
    pub job_id: JobId,
    pub attempt: u32,
    pub resource_id: ResourceId,
    pub cpu_hours: f64,
    pub rate: Money,
    pub amount: Money,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("job {job} attempt {attempt} has already been charged")]
    DoubleCharge { job: JobId, attempt: u32 },
    #[error("charge of {amount} would raise spend to {would_be}, over the budget of {budget}")]
    ExceedsBudget { amount: Money, would_be: Money, budget: Money },
    #[error("reservation of {amount} exceeds remaining headroom {headroom}")]
    NoHeadroom { amount: Money, headroom: Money },
    #[error("negative cpu time {0}")]
    NegativeCpu(f64),
}

/// Budget, committed charges and in-flight reservations of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub budget: Money,
    /// When false the budget is advisory: charges are never refused.
    pub enforce: bool,
    entries: Vec<LedgerEntry>,
    committed: Money,
    reservations: BTreeMap<(JobId, u32), Money>,
    #[serde(skip)]
    charged: BTreeSet<(JobId, u32)>,
}

impl BudgetLedger {
    pub fn new(budget: Money, enforce: bool) -> Self {
        BudgetLedger {
            budget,
            enforce,
            entries: Vec::new(),
            committed: Money::ZERO,
            reservations: BTreeMap::new(),
            charged: BTreeSet::new(),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn committed(&self) -> Money {
        self.committed
    }

    pub fn reserved(&self) -> Money {
        self.reservations.values().sum()
    }

    /// The value compared against the budget before dispatching more work.
    pub fn ceiling_check_value(&self) -> Money {
        self.committed + self.reserved()
    }

    /// Budget left once charges and reservations are counted; may be negative
    /// after the budget is steered below spend.
    pub fn headroom(&self) -> Money {
        self.budget - self.ceiling_check_value()
    }

    pub fn is_charged(&self, job: JobId, attempt: u32) -> bool {
        self.charged.contains(&(job, attempt))
    }

    pub fn reservation(&self, job: JobId, attempt: u32) -> Option<Money> {
        self.reservations.get(&(job, attempt)).copied()
    }

    /// Checks whether a reservation of `amount` fits; under enforcement it must
    /// not push committed + reserved over the budget.
    pub fn can_reserve(&self, amount: Money) -> bool {
        !self.enforce || self.ceiling_check_value() + amount <= self.budget
    }

    pub fn reserve(&mut self, job: JobId, attempt: u32, amount: Money) -> Result<(), LedgerError> {
        if !self.can_reserve(amount) {
            return Err(LedgerError::NoHeadroom { amount, headroom: self.headroom() });
        }
        self.reservations.insert((job, attempt), amount);
        Ok(())
    }

    pub fn release(&mut self, job: JobId, attempt: u32) -> Option<Money> {
        self.reservations.remove(&(job, attempt))
    }

    pub fn release_all(&mut self) {
        self.reservations.clear();
    }

    /// Validates a charge without applying it.
    pub fn check_charge(&self, job: JobId, attempt: u32, amount: Money, cpu_hours: f64) -> Result<(), LedgerError> {
        if cpu_hours < 0.0 || cpu_hours.is_nan() {
            return Err(LedgerError::NegativeCpu(cpu_hours));
        }
        if self.charged.contains(&(job, attempt)) {
            return Err(LedgerError::DoubleCharge { job, attempt });
        }
        let would_be = self.committed + amount;
        if self.enforce && amount.is_positive() && would_be > self.budget {
            return Err(LedgerError::ExceedsBudget { amount, would_be, budget: self.budget });
        }
        Ok(())
    }

    /// Appends a charge of `cpu_hours × rate` and releases the attempt's
    /// reservation.
    pub fn charge(&mut self, entry: LedgerEntry) -> Result<&LedgerEntry, LedgerError> {
        self.check_charge(entry.job_id, entry.attempt, entry.amount, entry.cpu_hours)?;
        self.reservations.remove(&(entry.job_id, entry.attempt));
        self.charged.insert((entry.job_id, entry.attempt));
        self.committed += entry.amount;
        self.entries.push(entry);
        Ok(self.entries.last().unwrap())
    }

    /// Recomputes committed from the entries; equals [`Self::committed`] always.
    pub fn recomputed_committed(&self) -> Money {
        self.entries.iter().map(|e| e.amount).sum()
    }

    /// Charged amount per resource.
    pub fn by_resource(&self) -> BTreeMap<ResourceId, Money> {
        let mut out: BTreeMap<ResourceId, Money> = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.resource_id.clone()).or_default() += e.amount;
        }
        out
    }

    /// Rebuilds derived indexes after deserialization.
    pub fn reindex(&mut self) {
        self.charged = self.entries.iter().map(|e| (e.job_id, e.attempt)).collect();
        self.committed = self.recomputed_committed();
    }

    /// CSV with columns `seq,t_sim,job_id,resource_id,cpu_hours,rate,amount`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "seq,t_sim,job_id,resource_id,cpu_hours,rate,amount")?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{:.6},{},{}",
                e.seq,
                e.t_sim.since_start(),
                e.job_id.0,
                e.resource_id,
                e.cpu_hours,
                e.rate,
                e.amount
            )?;
        }
        Ok(())
    }
}

/// Money for `cpu_hours` at `rate`, rounded to the cent.
pub fn charge_amount(rate: Money, cpu_hours: f64) -> Money {
    rate.scale(cpu_hours)
}
