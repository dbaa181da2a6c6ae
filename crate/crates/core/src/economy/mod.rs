//! Computational-economy machinery: time-varying cost schedules, the budget
//! ledger, pre-run quotes and sealed-bid tenders.

mod ledger;
mod quote;
mod schedule;
mod tender;

pub use ledger::{charge_amount, BudgetLedger, LedgerEntry, LedgerError};
pub use quote::{quote, AssumedResource, Quote};
pub use schedule::{cost_at, integrated_charge, peak_rate, CostSchedule, ScheduleError, Segment};
pub use tender::{owner_bid, run_tender, AcceptedBid, Bid, TenderError, TenderOutcome, TenderRequest};
