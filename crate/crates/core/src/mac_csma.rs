//! Unslotted CSMA/CA.
//!
//! A transaction covers one packet from its first backoff to either an ACK or
//! retry exhaustion. Backoff length in unit periods is drawn uniformly from
//! `[c_nb + c_be, c_nb + c_be + 2^attempt - 1]`, where `attempt` counts
//! transmission attempts so far (starting at 1). A single CCA follows each
//! backoff. Only transmissions from the sender's neighbours are visible to
//! the CCA, which is what leaves hidden nodes free to collide.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::channel::ChannelState;
use crate::topology::{NodeId, Topology};

/// Exponent ceiling for window growth. Attempts beyond it reuse the
/// `2^WINDOW_EXPONENT_CAP` window.
pub const WINDOW_EXPONENT_CAP: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackoffParams {
    pub c_nb: u32,
    pub c_be: u32,
    /// Transmission attempts before a packet is dropped.
    pub max_attempts: u32,
    pub unit_backoff_us: u64,
}

impl Default for BackoffParams {
    fn default() -> Self {
        BackoffParams { c_nb: 5, c_be: 7, max_attempts: 8, unit_backoff_us: 1_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsmaParams {
    pub backoff: BackoffParams,
    /// Channel occupancy of one data + ACK exchange.
    pub txn_duration_us: u64,
}

impl Default for CsmaParams {
    fn default() -> Self {
        CsmaParams { backoff: BackoffParams::default(), txn_duration_us: 4_000 }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacError {
    #[error("attempt must be >= 1, got {0}")]
    InvalidAttempt(u32),
    #[error("attempt {attempt} exceeds window exponent cap {cap}")]
    OverflowGuard { attempt: u32, cap: u32 },
    #[error("event {event:?} is not valid in state {state:?}")]
    IllegalTransition { state: TxnState, event: TxnEvent },
}

/// Backoff window `(lo, hi)` in unit periods, inclusive.
pub fn backoff_window(params: &BackoffParams, attempt: u32) -> Result<(u64, u64), MacError> {
    if attempt == 0 {
        return Err(MacError::InvalidAttempt(attempt));
    }
    if attempt > WINDOW_EXPONENT_CAP {
        return Err(MacError::OverflowGuard { attempt, cap: WINDOW_EXPONENT_CAP });
    }
    let lo = u64::from(params.c_nb) + u64::from(params.c_be);
    Ok((lo, lo + (1u64 << attempt) - 1))
}

/// Uniform draw from the window of `attempt`, clamped to the exponent cap.
pub fn draw_backoff<R: Rng + ?Sized>(params: &BackoffParams, attempt: u32, rng: &mut R) -> Result<u64, MacError> {
    let (lo, hi) = backoff_window(params, attempt.min(WINDOW_EXPONENT_CAP))?;
    Ok(rng.gen_range(lo..=hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcaResult {
    Clear,
    Busy,
}

/// Point-in-time channel assessment by `sender` on `channel`.
///
/// Busy iff a neighbour of `sender` started transmitting on that channel
/// strictly before `now` and has not finished by `now`. A transmission that
/// starts at exactly `now` is not yet detectable, so two nodes assessing at
/// the same instant both see a clear channel.
pub fn cca(state: &ChannelState, topology: &Topology, sender: NodeId, channel: u16, now: u64) -> CcaResult {
    let busy = state
        .active()
        .iter()
        .any(|tx| tx.channel == channel && tx.start < now && now < tx.end && topology.adjacent(sender, tx.sender));
    if busy {
        CcaResult::Busy
    } else {
        CcaResult::Clear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnState {
    BackingOff,
    Cca,
    Transmitting,
    AwaitingAck,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnEvent {
    BackoffExpired,
    CcaClear,
    CcaBusy,
    /// The medium was not available to this sender (outside its contention
    /// window). Retried without consuming an attempt.
    Deferred,
    TxComplete,
    Ack,
    NoAck,
}

/// What the owner of the transaction must do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnAction {
    /// Assess the channel after this many microseconds of backoff.
    ScheduleCca {
        backoff_us: u64,
    },
    /// Occupy the channel for this long.
    Transmit {
        duration_us: u64,
    },
    /// Nothing to schedule; wait for the next event.
    Wait,
    Delivered,
    Dropped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsmaTransaction {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub packet_id: u64,
    pub attempt: u32,
    pub state: TxnState,
}

impl fmt::Display for CsmaTransaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pkt{} {}->{} attempt {} {:?}", self.packet_id, self.sender, self.receiver, self.attempt, self.state)
    }
}

impl CsmaTransaction {
    /// Opens a transaction at attempt 1 and draws its first backoff.
    pub fn start<R: Rng + ?Sized>(
        sender: NodeId,
        receiver: NodeId,
        packet_id: u64,
        params: &CsmaParams,
        rng: &mut R,
    ) -> (Self, TxnAction) {
        let txn = CsmaTransaction { sender, receiver, packet_id, attempt: 1, state: TxnState::BackingOff };
        let action = txn.backoff(params, rng);
        (txn, action)
    }

    fn backoff<R: Rng + ?Sized>(&self, params: &CsmaParams, rng: &mut R) -> TxnAction {
        let slots = draw_backoff(&params.backoff, self.attempt, rng).expect("attempt >= 1 inside a transaction");
        TxnAction::ScheduleCca { backoff_us: slots * params.backoff.unit_backoff_us }
    }

    fn retry<R: Rng + ?Sized>(&mut self, params: &CsmaParams, rng: &mut R) -> TxnAction {
        self.attempt += 1;
        if self.attempt > params.backoff.max_attempts {
            self.attempt = params.backoff.max_attempts;
            self.state = TxnState::Failed;
            TxnAction::Dropped
        } else {
            self.state = TxnState::BackingOff;
            self.backoff(params, rng)
        }
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, TxnState::Done | TxnState::Failed)
    }

    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        event: TxnEvent,
        params: &CsmaParams,
        rng: &mut R,
    ) -> Result<TxnAction, MacError> {
        use TxnEvent as E;
        use TxnState as S;
        let action = match (self.state, event) {
            (S::BackingOff, E::BackoffExpired) => {
                self.state = S::Cca;
                TxnAction::Wait
            }
            (S::Cca, E::CcaClear) => {
                self.state = S::Transmitting;
                TxnAction::Transmit { duration_us: params.txn_duration_us }
            }
            (S::Cca, E::CcaBusy) => self.retry(params, rng),
            (S::Cca, E::Deferred) => {
                self.state = S::BackingOff;
                self.backoff(params, rng)
            }
            (S::Transmitting, E::TxComplete) => {
                self.state = S::AwaitingAck;
                TxnAction::Wait
            }
            (S::AwaitingAck, E::Ack) => {
                self.state = S::Done;
                TxnAction::Delivered
            }
            (S::AwaitingAck, E::NoAck) => self.retry(params, rng),
            (state, event) => return Err(MacError::IllegalTransition { state, event }),
        };
        Ok(action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::channel::Transmission;
    use crate::rng::{stream, Stream};

    fn p(c_nb: u32, c_be: u32) -> BackoffParams {
        BackoffParams { c_nb, c_be, ..BackoffParams::default() }
    }

    #[test]
    fn window_examples() {
        assert_eq!(backoff_window(&p(5, 7), 1), Ok((12, 13)));
        assert_eq!(backoff_window(&p(5, 7), 3), Ok((12, 19)));
        assert_eq!(backoff_window(&p(0, 0), 1), Ok((0, 1)));
        assert_eq!(backoff_window(&p(0, 0), 0), Err(MacError::InvalidAttempt(0)));
        assert_eq!(backoff_window(&p(5, 7), 9), Err(MacError::OverflowGuard { attempt: 9, cap: WINDOW_EXPONENT_CAP }));
    }

    #[test]
    fn window_is_monotone() {
        let params = p(5, 7);
        for a in 1..WINDOW_EXPONENT_CAP {
            let (lo0, hi0) = backoff_window(&params, a).unwrap();
            let (lo1, hi1) = backoff_window(&params, a + 1).unwrap();
            assert!(lo1 >= lo0 && hi1 >= hi0);
        }
    }

    #[test]
    fn draws_stay_in_two_point_window() {
        let mut rng = stream(1, Stream::Backoff);
        let params = p(5, 7);
        for _ in 0..1000 {
            let v = draw_backoff(&params, 1, &mut rng).unwrap();
            assert!(v == 12 || v == 13);
        }
        assert_eq!(draw_backoff(&params, 0, &mut rng), Err(MacError::InvalidAttempt(0)));
        // Past the cap the window stops growing.
        for _ in 0..1000 {
            let v = draw_backoff(&params, 12, &mut rng).unwrap();
            assert!((12..=12 + 255).contains(&v));
        }
    }

    #[test]
    fn draws_are_uniform() {
        // Window (12, 19): eight values, 12.5 % each.
        let mut rng = stream(2024, Stream::Backoff);
        let params = p(5, 7);
        let n = 100_000;
        let mut counts = [0u32; 8];
        let mut sum = 0u64;
        for _ in 0..n {
            let v = draw_backoff(&params, 3, &mut rng).unwrap();
            counts[(v - 12) as usize] += 1;
            sum += v;
        }
        for c in counts {
            let f = f64::from(c) / f64::from(n);
            assert!((f - 0.125).abs() < 0.005, "frequency {f}");
        }
        let expected = f64::from(n) / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (f64::from(c) - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 24.32, "chi-square {chi2}");
        let mean = sum as f64 / f64::from(n);
        assert!((mean - 15.5).abs() / 15.5 < 0.01);
    }

    #[test]
    fn draws_are_reproducible() {
        let params = p(5, 7);
        let seq = |seed| {
            let mut rng = stream(seed, Stream::Backoff);
            (0..32).map(|_| draw_backoff(&params, 4, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(5), seq(5));
    }

    fn tx(id: u64, sender: u32, receiver: u32, start: u64, end: u64) -> Transmission {
        Transmission { id, sender: NodeId(sender), receiver: NodeId(receiver), channel: 0, start, end }
    }

    #[test]
    fn cca_sees_only_neighbours() {
        // 1 - 0 - 2: 1 and 2 hidden from each other.
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let mut ch = ChannelState::default();
        assert_eq!(cca(&ch, &t, NodeId(1), 0, 100), CcaResult::Clear);
        ch.begin(tx(1, 2, 0, 50, 4050));
        assert_eq!(cca(&ch, &t, NodeId(1), 0, 100), CcaResult::Clear);
        assert_eq!(cca(&ch, &t, NodeId(0), 0, 100), CcaResult::Busy);
        // Different channel, same neighbour.
        assert_eq!(cca(&ch, &t, NodeId(0), 1, 100), CcaResult::Clear);
        // Same-instant start is invisible; finished is invisible.
        assert_eq!(cca(&ch, &t, NodeId(0), 0, 50), CcaResult::Clear);
        assert_eq!(cca(&ch, &t, NodeId(0), 0, 4050), CcaResult::Clear);
    }

    #[test]
    fn clear_cca_transmits_for_txn_duration() {
        let params = CsmaParams::default();
        let mut rng = stream(3, Stream::Backoff);
        let (mut txn, first) = CsmaTransaction::start(NodeId(1), NodeId(0), 7, &params, &mut rng);
        assert!(matches!(first, TxnAction::ScheduleCca { backoff_us } if backoff_us == 12_000 || backoff_us == 13_000));
        assert_eq!(txn.advance(TxnEvent::BackoffExpired, &params, &mut rng), Ok(TxnAction::Wait));
        assert_eq!(txn.advance(TxnEvent::CcaClear, &params, &mut rng), Ok(TxnAction::Transmit { duration_us: 4_000 }));
        assert_eq!(txn.state, TxnState::Transmitting);
        assert_eq!(txn.attempt, 1);
    }

    #[test]
    fn busy_at_last_attempt_fails() {
        let params = CsmaParams::default();
        let mut rng = stream(3, Stream::Backoff);
        let mut txn = CsmaTransaction {
            sender: NodeId(1),
            receiver: NodeId(0),
            packet_id: 0,
            attempt: params.backoff.max_attempts,
            state: TxnState::Cca,
        };
        assert_eq!(txn.advance(TxnEvent::CcaBusy, &params, &mut rng), Ok(TxnAction::Dropped));
        assert_eq!(txn.state, TxnState::Failed);
    }

    #[test]
    fn missing_ack_widens_window() {
        let params = CsmaParams::default();
        let mut rng = stream(4, Stream::Backoff);
        let mut txn = CsmaTransaction {
            sender: NodeId(1),
            receiver: NodeId(0),
            packet_id: 0,
            attempt: 2,
            state: TxnState::AwaitingAck,
        };
        let action = txn.advance(TxnEvent::NoAck, &params, &mut rng).unwrap();
        assert_eq!(txn.state, TxnState::BackingOff);
        assert_eq!(txn.attempt, 3);
        match action {
            TxnAction::ScheduleCca { backoff_us } => assert!((12_000..=19_000).contains(&backoff_us)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deferral_keeps_attempt() {
        let params = CsmaParams::default();
        let mut rng = stream(4, Stream::Backoff);
        let mut txn =
            CsmaTransaction { sender: NodeId(1), receiver: NodeId(0), packet_id: 0, attempt: 3, state: TxnState::Cca };
        assert!(matches!(txn.advance(TxnEvent::Deferred, &params, &mut rng), Ok(TxnAction::ScheduleCca { .. })));
        assert_eq!(txn.attempt, 3);
    }

    #[test]
    fn illegal_transition_is_reported() {
        let params = CsmaParams::default();
        let mut rng = stream(4, Stream::Backoff);
        let mut txn = CsmaTransaction {
            sender: NodeId(1),
            receiver: NodeId(0),
            packet_id: 0,
            attempt: 1,
            state: TxnState::BackingOff,
        };
        assert_eq!(
            txn.advance(TxnEvent::Ack, &params, &mut rng),
            Err(MacError::IllegalTransition { state: TxnState::BackingOff, event: TxnEvent::Ack })
        );
    }
}
