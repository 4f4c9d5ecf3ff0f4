//! Typed vehicle-to-vehicle message bus with an optional Bernoulli drop model.
//!
//! Drop decisions use a counter-based hash of `(seed, sequence, recipient)`
//! rather than a shared generator, so they do not depend on the order in
//! which vehicles are iterated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::longitudinal::Trajectory;
use crate::platooning::{JoinPlan, JoinRequest, MemberMode};
use crate::world::{KinematicState, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    pub drop_probability: f64,
    pub latency_steps: u64,
    pub seed: u64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            drop_probability: 0.0,
            latency_steps: 0,
            seed: 0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::Config(format!(
                "channel.drop_probability must be in [0, 1], got {}",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Recipients {
    Broadcast,
    To(Vec<VehicleId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    Status,
    PlannedTrajectory,
    JoinRequest,
    JoinResponse,
    GapOpenCommand,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Status => "status",
            MessageKind::PlannedTrajectory => "planned_trajectory",
            MessageKind::JoinRequest => "join_request",
            MessageKind::JoinResponse => "join_response",
            MessageKind::GapOpenCommand => "gap_open_command",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusPayload {
    pub state: KinematicState,
    pub length: f64,
    pub mode: Option<MemberMode>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JoinResponse {
    Accept(JoinPlan),
    Reject(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Status(StatusPayload),
    PlannedTrajectory(Trajectory),
    JoinRequest(JoinRequest),
    JoinResponse(JoinResponse),
    /// Open a gap for `joiner`; cancel when `open` is false.
    GapOpenCommand {
        joiner: VehicleId,
        open: bool,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Status(_) => MessageKind::Status,
            Payload::PlannedTrajectory(_) => MessageKind::PlannedTrajectory,
            Payload::JoinRequest(_) => MessageKind::JoinRequest,
            Payload::JoinResponse(_) => MessageKind::JoinResponse,
            Payload::GapOpenCommand { .. } => MessageKind::GapOpenCommand,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct V2XMessage {
    pub sender: VehicleId,
    pub recipients: Recipients,
    pub kind: MessageKind,
    pub payload: Payload,
    pub tx_step: u64,
}

impl V2XMessage {
    pub fn new(sender: VehicleId, recipients: Recipients, payload: Payload, tx_step: u64) -> Self {
        Self {
            sender,
            recipients,
            kind: payload.kind(),
            payload,
            tx_step,
        }
    }
}

/// A message as it sits in a recipient's mailbox.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub seq: u64,
    pub delivery_step: u64,
    pub message: V2XMessage,
}

pub type Mailboxes = BTreeMap<VehicleId, Vec<Envelope>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryRecord {
    pub step: u64,
    pub seq: u64,
    pub sender: VehicleId,
    pub recipient: VehicleId,
    pub kind: MessageKind,
    pub dropped: bool,
}

/// The two operations the simulation loop needs from a link layer.
pub trait Transport {
    fn send(&mut self, message: V2XMessage) -> Result<()>;
    fn deliver(&mut self, current_step: u64) -> Mailboxes;
    fn register(&mut self, id: VehicleId);
    fn unregister(&mut self, id: VehicleId);
}

#[derive(Debug, Clone)]
struct Pending {
    seq: u64,
    delivery_step: u64,
    recipients: Vec<VehicleId>,
    message: V2XMessage,
}

#[derive(Debug, Clone)]
pub struct MessageBus {
    channel: ChannelModel,
    registered: BTreeSet<VehicleId>,
    pending: Vec<Pending>,
    next_seq: u64,
    log: Vec<DeliveryRecord>,
}

impl MessageBus {
    pub fn new(channel: ChannelModel) -> Result<Self> {
        channel.validate()?;
        Ok(Self {
            channel,
            registered: BTreeSet::new(),
            pending: Vec::new(),
            next_seq: 0,
            log: Vec::new(),
        })
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn log(&self) -> &[DeliveryRecord] {
        &self.log
    }

    pub fn pending_deliveries(&self) -> usize {
        self.pending.iter().map(|p| p.recipients.len()).sum()
    }

    /// Writes the delivery log as `step,sender,recipient,kind,dropped`.
    pub fn write_drop_log<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "sender", "recipient", "kind", "dropped"])?;
        for r in &self.log {
            w.write_record([
                r.step.to_string(),
                r.sender.to_string(),
                r.recipient.to_string(),
                r.kind.as_str().to_string(),
                r.dropped.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    fn is_delivered(&self, seq: u64, recipient: VehicleId) -> bool {
        let p = self.channel.drop_probability;
        if p <= 0.0 {
            return true;
        }
        unit_draw(self.channel.seed, seq, recipient) >= p
    }
}

impl Transport for MessageBus {
    fn send(&mut self, message: V2XMessage) -> Result<()> {
        if message.kind != message.payload.kind() {
            return Err(Error::Protocol(format!(
                "declared kind {:?} does not match payload {:?}",
                message.kind,
                message.payload.kind()
            )));
        }
        let recipients: Vec<VehicleId> = match &message.recipients {
            Recipients::Broadcast => self
                .registered
                .iter()
                .copied()
                .filter(|id| *id != message.sender)
                .collect(),
            Recipients::To(ids) => {
                let mut out = Vec::with_capacity(ids.len());
                for id in ids {
                    if *id == message.sender {
                        return Err(Error::Protocol(format!("vehicle {id} addressed itself")));
                    }
                    if !self.registered.contains(id) {
                        return Err(Error::Addressing(*id));
                    }
                    if !out.contains(id) {
                        out.push(*id);
                    }
                }
                out
            }
        };
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push(Pending {
            seq,
            delivery_step: message.tx_step + self.channel.latency_steps,
            recipients,
            message,
        });
        Ok(())
    }

    fn deliver(&mut self, current_step: u64) -> Mailboxes {
        let (due, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.delivery_step <= current_step);
        self.pending = later;

        let mut boxes = Mailboxes::new();
        for p in due {
            for &recipient in &p.recipients {
                let delivered =
                    self.registered.contains(&recipient) && self.is_delivered(p.seq, recipient);
                self.log.push(DeliveryRecord {
                    step: current_step,
                    seq: p.seq,
                    sender: p.message.sender,
                    recipient,
                    kind: p.message.kind,
                    dropped: !delivered,
                });
                if delivered {
                    boxes.entry(recipient).or_default().push(Envelope {
                        seq: p.seq,
                        delivery_step: p.delivery_step,
                        message: p.message.clone(),
                    });
                }
            }
        }
        for mailbox in boxes.values_mut() {
            mailbox.sort_by_key(|e| (e.delivery_step, e.seq));
        }
        boxes
    }

    fn register(&mut self, id: VehicleId) {
        self.registered.insert(id);
    }

    fn unregister(&mut self, id: VehicleId) {
        self.registered.remove(&id);
    }
}

/// Lossless zero-latency link that hands messages straight to recipients.
#[derive(Debug, Clone, Default)]
pub struct DirectLink {
    registered: BTreeSet<VehicleId>,
    queued: Vec<(u64, V2XMessage)>,
    next_seq: u64,
}

impl Transport for DirectLink {
    fn send(&mut self, message: V2XMessage) -> Result<()> {
        self.queued.push((self.next_seq, message));
        self.next_seq += 1;
        Ok(())
    }

    fn deliver(&mut self, _current_step: u64) -> Mailboxes {
        let mut boxes = Mailboxes::new();
        for (seq, message) in self.queued.drain(..) {
            let targets: Vec<VehicleId> = match &message.recipients {
                Recipients::Broadcast => self
                    .registered
                    .iter()
                    .copied()
                    .filter(|id| *id != message.sender)
                    .collect(),
                Recipients::To(ids) => ids.clone(),
            };
            for t in targets {
                boxes.entry(t).or_default().push(Envelope {
                    seq,
                    delivery_step: message.tx_step,
                    message: message.clone(),
                });
            }
        }
        boxes
    }

    fn register(&mut self, id: VehicleId) {
        self.registered.insert(id);
    }

    fn unregister(&mut self, id: VehicleId) {
        self.registered.remove(&id);
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform draw in `[0, 1)` keyed by seed, message sequence and recipient.
pub fn unit_draw(seed: u64, seq: u64, recipient: VehicleId) -> f64 {
    let key = seed
        ^ splitmix64(seq)
        ^ splitmix64(u64::from(recipient.0).wrapping_add(0xA076_1D64_78BD_642F));
    (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn status(sender: u32, recipients: Recipients, step: u64) -> V2XMessage {
        V2XMessage::new(
            VehicleId(sender),
            recipients,
            Payload::Status(StatusPayload {
                state: KinematicState::new(0.0, 0, 0.0),
                length: 5.0,
                mode: None,
            }),
            step,
        )
    }

    fn bus(p: f64, latency: u64, seed: u64, n: u32) -> MessageBus {
        let mut b = MessageBus::new(ChannelModel {
            drop_probability: p,
            latency_steps: latency,
            seed,
        })
        .unwrap();
        for i in 0..n {
            b.register(VehicleId(i));
        }
        b
    }

    #[test]
    fn broadcast_reaches_everyone_else() {
        let mut b = bus(0.0, 0, 1, 4);
        b.send(status(0, Recipients::Broadcast, 0)).unwrap();
        let boxes = b.deliver(0);
        assert_eq!(boxes.len(), 3);
        assert!(!boxes.contains_key(&VehicleId(0)));
    }

    #[test]
    fn unicast_reaches_only_recipient() {
        let mut b = bus(0.0, 0, 1, 4);
        let msg = V2XMessage::new(
            VehicleId(0),
            Recipients::To(vec![VehicleId(3)]),
            Payload::JoinResponse(JoinResponse::Reject("busy".into())),
            5,
        );
        b.send(msg).unwrap();
        let boxes = b.deliver(5);
        assert_eq!(
            boxes.keys().copied().collect::<Vec<_>>(),
            vec![VehicleId(3)]
        );
    }

    #[test]
    fn latency_schedules_later_delivery() {
        let mut b = bus(0.0, 2, 1, 2);
        b.send(status(0, Recipients::Broadcast, 10)).unwrap();
        assert!(b.deliver(10).is_empty());
        assert!(b.deliver(11).is_empty());
        let boxes = b.deliver(12);
        assert_eq!(boxes[&VehicleId(1)][0].delivery_step, 12);
    }

    #[test]
    fn unknown_recipient_is_addressing_error() {
        let mut b = bus(0.0, 0, 1, 2);
        let err = b
            .send(status(0, Recipients::To(vec![VehicleId(9)]), 0))
            .unwrap_err();
        assert!(matches!(err, Error::Addressing(VehicleId(9))));
        assert!(b
            .send(status(0, Recipients::To(vec![VehicleId(0)]), 0))
            .is_err());
    }

    #[test]
    fn mismatched_kind_rejected() {
        let mut b = bus(0.0, 0, 1, 2);
        let mut msg = status(0, Recipients::Broadcast, 0);
        msg.kind = MessageKind::JoinRequest;
        assert!(b.send(msg).is_err());
    }

    #[test]
    fn lossless_delivers_everything_once() {
        let mut b = bus(0.0, 0, 9, 5);
        for step in 0..20 {
            for s in 0..5 {
                b.send(status(s, Recipients::Broadcast, step)).unwrap();
            }
            let boxes = b.deliver(step);
            let total: usize = boxes.values().map(Vec::len).sum();
            assert_eq!(total, 20);
        }
        assert!(b.log().iter().all(|r| !r.dropped));
    }

    #[test]
    fn certain_drop_delivers_nothing() {
        let mut b = bus(1.0, 0, 9, 5);
        b.send(status(0, Recipients::Broadcast, 0)).unwrap();
        assert!(b.deliver(0).is_empty());
        assert_eq!(b.log().len(), 4);
        assert!(b.log().iter().all(|r| r.dropped));
    }

    #[test]
    fn half_drop_rate_is_near_half() {
        let mut b = bus(0.5, 0, 42, 2);
        let mut delivered = 0usize;
        for step in 0..10_000 {
            b.send(status(0, Recipients::To(vec![VehicleId(1)]), step))
                .unwrap();
            delivered += b.deliver(step).values().map(Vec::len).sum::<usize>();
        }
        let rate = delivered as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "rate {rate}");
    }

    #[test]
    fn mailbox_ordering() {
        let mut b = bus(0.0, 0, 1, 4);
        b.send(status(2, Recipients::Broadcast, 3)).unwrap();
        b.send(status(1, Recipients::Broadcast, 1)).unwrap();
        b.send(status(0, Recipients::Broadcast, 3)).unwrap();
        let boxes = b.deliver(3);
        let keys: Vec<(u64, u64)> = boxes[&VehicleId(3)]
            .iter()
            .map(|e| (e.delivery_step, e.seq))
            .collect();
        assert_eq!(keys, vec![(1, 1), (3, 0), (3, 2)]);
    }

    #[test]
    fn drop_log_csv_header() {
        let mut b = bus(1.0, 0, 1, 2);
        b.send(status(0, Recipients::Broadcast, 0)).unwrap();
        b.deliver(0);
        let mut out = Vec::new();
        b.write_drop_log(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "step,sender,recipient,kind,dropped\n0,0,1,status,true\n"
        );
    }

    proptest! {
        #[test]
        fn drop_decisions_deterministic(seed in any::<u64>(), p in 0.0f64..1.0) {
            let run = || {
                let mut b = bus(p, 1, seed, 4);
                let mut out = Vec::new();
                for step in 0..30 {
                    b.send(status((step % 4) as u32, Recipients::Broadcast, step)).unwrap();
                    out.push(b.deliver(step));
                }
                (out, b.log().to_vec())
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn no_duplicate_deliveries(p in 0.0f64..1.0, latency in 0u64..4) {
            let mut b = bus(p, latency, 3, 4);
            let mut seen = BTreeSet::new();
            for step in 0..40 {
                b.send(status((step % 4) as u32, Recipients::Broadcast, step)).unwrap();
                for (rcpt, mail) in b.deliver(step) {
                    for e in mail {
                        prop_assert!(seen.insert((e.seq, rcpt)));
                    }
                }
            }
        }
    }
}
