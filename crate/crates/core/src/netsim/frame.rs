use serde::{Deserialize, Serialize};

use super::{NetError, NodeId};

pub const MIN_MTU: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameKind {
    Data,
    Ack,
    Lsa,
    Hello,
    Digest,
}

impl FrameKind {
    pub fn name(self) -> &'static str {
        match self {
            FrameKind::Data => "DATA",
            FrameKind::Ack => "ACK",
            FrameKind::Lsa => "LSA",
            FrameKind::Hello => "HELLO",
            FrameKind::Digest => "DIGEST",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FragInfo {
    pub msg_id: u64,
    pub index: u32,
    pub total: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: u16,
    pub seq: u64,
    pub kind: FrameKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dst: NodeId,
    pub channel: u16,
    pub seq: u64,
    pub frag: Option<FragInfo>,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn header(&self) -> FrameHeader {
        FrameHeader {
            src: self.src,
            dst: self.dst,
            channel: self.channel,
            seq: self.seq,
            kind: self.kind,
        }
    }
}

/// Splits `payload` into frames of at most `mtu` payload bytes. An empty
/// payload still yields one frame.
pub fn fragment_payload(
    header: FrameHeader,
    msg_id: u64,
    payload: &[u8],
    mtu: usize,
) -> Result<Vec<Frame>, NetError> {
    if mtu < MIN_MTU {
        return Err(NetError::MtuTooSmall(mtu));
    }
    let total = payload.len().div_ceil(mtu).max(1);
    let total_u32 = u32::try_from(total).map_err(|_| NetError::PayloadTooLarge(payload.len()))?;
    let mut frames = Vec::with_capacity(total);
    for index in 0..total {
        let start = index * mtu;
        let end = (start + mtu).min(payload.len());
        frames.push(Frame {
            src: header.src,
            dst: header.dst,
            channel: header.channel,
            seq: header.seq,
            frag: Some(FragInfo {
                msg_id,
                index: index as u32,
                total: total_u32,
            }),
            kind: header.kind,
            payload: payload[start.min(end)..end].to_vec(),
        });
    }
    Ok(frames)
}

/// Rebuilds a payload from the complete fragment set of one message, in any order.
pub fn reassemble(frames: &[Frame]) -> Result<Vec<u8>, NetError> {
    let first = frames
        .first()
        .ok_or(NetError::IncompleteFragmentSet { have: 0, total: 0 })?;
    let Some(info) = first.frag else {
        return Ok(first.payload.clone());
    };
    let total = info.total as usize;
    let mut slots: Vec<Option<&Frame>> = vec![None; total];
    for f in frames {
        let fi = f.frag.ok_or(NetError::IndexOutOfRange {
            index: 0,
            total: info.total,
        })?;
        if fi.msg_id != info.msg_id || fi.total != info.total {
            return Err(NetError::MixedFragmentSet);
        }
        if fi.index >= fi.total {
            return Err(NetError::IndexOutOfRange {
                index: fi.index,
                total: fi.total,
            });
        }
        let slot = &mut slots[fi.index as usize];
        if slot.is_some() {
            return Err(NetError::DuplicateFragment(fi.index));
        }
        *slot = Some(f);
    }
    let have = slots.iter().filter(|s| s.is_some()).count();
    if have != total {
        return Err(NetError::IncompleteFragmentSet { have, total });
    }
    let mut out = Vec::new();
    for f in slots.into_iter().flatten() {
        out.extend_from_slice(&f.payload);
    }
    Ok(out)
}
