//! What a transport backend declares it can do.

use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::segment::Medium;
use crate::topology::RailKind;

/// Index of a loaded backend, in load (preference) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BackendId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Direction {
    /// The initiator pulls remote source bytes into its local destination.
    Read,
    /// The initiator pushes its local source bytes into the remote destination.
    Write,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::Read => Direction::Write,
            Direction::Write => Direction::Read,
        }
    }
}

/// Media of the data flow, source first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MediaPair {
    pub src: Medium,
    pub dst: Medium,
}

impl MediaPair {
    pub const fn new(src: Medium, dst: Medium) -> Self {
        MediaPair { src, dst }
    }

    pub fn reversed(self) -> Self {
        MediaPair {
            src: self.dst,
            dst: self.src,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BackendCapabilities {
    pub id: BackendId,
    pub name: String,
    pub media: Vec<MediaPair>,
    pub directions: Vec<Direction>,
    /// Which rail kind this backend drives.
    pub rail_kind: RailKind,
    pub cross_node: bool,
    pub intra_node: bool,
    pub max_post_bytes: u64,
    pub batched_post: bool,
}

impl BackendCapabilities {
    pub fn supports_media(&self, pair: MediaPair) -> bool {
        self.media.contains(&pair)
    }

    pub fn supports_direction(&self, dir: Direction) -> bool {
        self.directions.contains(&dir)
    }

    pub fn covers(&self, pair: MediaPair, dir: Direction, same_node: bool) -> bool {
        self.supports_media(pair)
            && self.supports_direction(dir)
            && if same_node {
                self.intra_node
            } else {
                self.cross_node
            }
    }

    /// Whether this backend can attach to segments of `medium` at all.
    pub fn serves_medium(&self, medium: Medium) -> bool {
        self.media.iter().any(|p| p.src == medium || p.dst == medium)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn covers_checks_every_axis() {
        let caps = BackendCapabilities {
            id: BackendId(0),
            name: "x".into(),
            media: vec![MediaPair::new(Medium::Host, Medium::Host)],
            directions: vec![Direction::Write],
            rail_kind: RailKind::Nic,
            cross_node: true,
            intra_node: false,
            max_post_bytes: 1 << 20,
            batched_post: true,
        };
        let hh = MediaPair::new(Medium::Host, Medium::Host);
        assert!(caps.covers(hh, Direction::Write, false));
        assert!(!caps.covers(hh, Direction::Read, false));
        assert!(!caps.covers(hh, Direction::Write, true));
        assert!(!caps.covers(MediaPair::new(Medium::Host, Medium::File), Direction::Write, false));
        assert!(caps.serves_medium(Medium::Host));
        assert!(!caps.serves_medium(Medium::File));
    }
}
