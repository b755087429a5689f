//! Shared-medium bookkeeping: which transmissions are on the air, and
//! whether a finished one was received.

use crate::topology::{NodeId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub id: u64,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub channel: u16,
    /// Inclusive start, exclusive end, microseconds.
    pub start: u64,
    pub end: u64,
}

impl Transmission {
    pub fn overlaps(&self, other: &Transmission) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reception {
    Delivered,
    Collided,
}

/// Did `tx` survive at its receiver, given every other transmission that
/// shared the air with it?
///
/// It is lost if an overlapping transmission on the same channel came from a
/// node the receiver can hear, or if the receiver was itself transmitting at
/// any point during it. Otherwise reception is certain.
pub fn resolve_reception(topology: &Topology, tx: &Transmission, others: &[Transmission]) -> Reception {
    let r = tx.receiver;
    let collided = others.iter().any(|o| {
        o.id != tx.id
            && o.overlaps(tx)
            && (o.sender == r || (o.channel == tx.channel && topology.adjacent(o.sender, r)))
    });
    if collided {
        Reception::Collided
    } else {
        Reception::Delivered
    }
}

/// Active transmissions plus recently finished ones that still overlap
/// something on the air.
#[derive(Debug, Clone, Default)]
pub struct ChannelState {
    active: Vec<Transmission>,
    finished: Vec<Transmission>,
}

impl ChannelState {
    pub fn active(&self) -> &[Transmission] {
        &self.active
    }

    pub fn begin(&mut self, tx: Transmission) {
        self.active.push(tx);
    }

    /// Removes `id` from the air and resolves it at its receiver.
    pub fn finish(&mut self, id: u64, topology: &Topology) -> Option<(Transmission, Reception)> {
        let pos = self.active.iter().position(|t| t.id == id)?;
        let tx = self.active.swap_remove(pos);
        let outcome = {
            let others: Vec<Transmission> =
                self.active.iter().chain(self.finished.iter()).copied().filter(|o| o.overlaps(&tx)).collect();
            resolve_reception(topology, &tx, &others)
        };
        self.finished.push(tx);
        let horizon = self.active.iter().map(|t| t.start).min();
        match horizon {
            Some(h) => self.finished.retain(|t| t.end > h),
            None => self.finished.clear(),
        }
        Some((tx, outcome))
    }

    pub fn is_idle(&self) -> bool {
        self.active.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(id: u64, s: u32, r: u32, start: u64, end: u64) -> Transmission {
        Transmission { id, sender: NodeId(s), receiver: NodeId(r), channel: 0, start, end }
    }

    #[test]
    fn lone_transmission_is_delivered() {
        let t = Topology::from_edges(2, &[(0, 1)]).unwrap();
        assert_eq!(resolve_reception(&t, &tx(1, 1, 0, 0, 10), &[]), Reception::Delivered);
    }

    #[test]
    fn hidden_senders_collide_at_common_receiver() {
        // 1 - 0 - 2
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let mut ch = ChannelState::default();
        ch.begin(tx(1, 1, 0, 0, 4000));
        ch.begin(tx(2, 2, 0, 1000, 5000));
        assert_eq!(ch.finish(1, &t).unwrap().1, Reception::Collided);
        assert_eq!(ch.finish(2, &t).unwrap().1, Reception::Collided);
        assert!(ch.is_idle());
    }

    #[test]
    fn disjoint_receivers_both_deliver() {
        // 1 -> 3 and 2 -> 4, with 1 inaudible at 4 and 2 inaudible at 3.
        // Edges: 0-1, 0-2, 1-3, 2-4.
        let t = Topology::from_edges(5, &[(0, 1), (0, 2), (1, 3), (2, 4)]).unwrap();
        let a = tx(1, 1, 3, 0, 4000);
        let b = tx(2, 2, 4, 500, 4500);
        assert_eq!(resolve_reception(&t, &a, &[b]), Reception::Delivered);
        assert_eq!(resolve_reception(&t, &b, &[a]), Reception::Delivered);
    }

    #[test]
    fn receiver_busy_transmitting_loses_packet() {
        let t = Topology::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let up = tx(1, 2, 1, 0, 4000);
        let relay = Transmission { channel: 3, ..tx(2, 1, 0, 2000, 6000) };
        assert_eq!(resolve_reception(&t, &up, &[relay]), Reception::Collided);
    }

    #[test]
    fn other_channel_does_not_interfere() {
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let a = tx(1, 1, 0, 0, 4000);
        let b = Transmission { channel: 1, ..tx(2, 2, 0, 0, 4000) };
        assert_eq!(resolve_reception(&t, &a, &[b]), Reception::Delivered);
    }

    #[test]
    fn back_to_back_is_not_overlap() {
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let a = tx(1, 1, 0, 0, 4000);
        let b = tx(2, 2, 0, 4000, 8000);
        assert_eq!(resolve_reception(&t, &a, &[b]), Reception::Delivered);
    }

    #[test]
    fn finished_history_still_counts() {
        // b ends before a; a must still see it.
        let t = Topology::from_edges(3, &[(0, 1), (0, 2)]).unwrap();
        let mut ch = ChannelState::default();
        ch.begin(tx(1, 1, 0, 0, 8000));
        ch.begin(tx(2, 2, 0, 1000, 3000));
        assert_eq!(ch.finish(2, &t).unwrap().1, Reception::Collided);
        assert_eq!(ch.finish(1, &t).unwrap().1, Reception::Collided);
    }
}
