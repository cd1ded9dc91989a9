//! Episode-aware replay of observations and env snapshots.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;

use crate::envs::grid::Body;
use crate::envs::EnvSnapshot;
use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Matrix};

#[derive(Clone, Debug, PartialEq)]
struct Episode {
    obs: VecDeque<Vec<f64>>,
    snapshots: VecDeque<EnvSnapshot>,
}

/// A contiguous slice of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub episode: u64,
    pub start: usize,
    pub states: Vec<Vec<f64>>,
    pub snapshots: Vec<EnvSnapshot>,
    /// The owning episode id of every state; all equal by construction.
    pub episode_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    segment_len: usize,
    episodes: BTreeMap<u64, Episode>,
    /// Open episode per collection slot.
    open: Vec<Option<u64>>,
    next_id: u64,
    size: usize,
}

impl ReplayBuffer {
    /// `segment_len` counts states, so a segment spans `segment_len - 1`
    /// transitions.
    pub fn new(capacity: usize, segment_len: usize, slots: usize) -> Result<Self> {
        if segment_len == 0 || capacity < segment_len {
            return Err(Error::Config(format!(
                "replay capacity {capacity} cannot hold a segment of {segment_len} states"
            )));
        }
        Ok(ReplayBuffer {
            capacity,
            segment_len,
            episodes: BTreeMap::new(),
            open: vec![None; slots],
            next_id: 0,
            size: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    /// Opens a new episode in `slot` with its first state.
    pub fn begin_episode(&mut self, slot: usize, obs: Vec<f64>, snapshot: EnvSnapshot) -> Result<u64> {
        let slot_ref = self
            .open
            .get_mut(slot)
            .ok_or_else(|| Error::Usage(format!("replay slot {slot} out of range")))?;
        let id = self.next_id;
        self.next_id += 1;
        *slot_ref = Some(id);
        self.episodes.insert(
            id,
            Episode {
                obs: VecDeque::from([obs]),
                snapshots: VecDeque::from([snapshot]),
            },
        );
        self.size += 1;
        self.evict();
        Ok(id)
    }

    /// Appends the state reached by the latest step in `slot`.
    pub fn push(&mut self, slot: usize, obs: Vec<f64>, snapshot: EnvSnapshot) -> Result<()> {
        let id = self
            .open
            .get(slot)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Usage(format!("replay slot {slot} has no open episode")))?;
        match self.episodes.get_mut(&id) {
            Some(ep) => {
                ep.obs.push_back(obs);
                ep.snapshots.push_back(snapshot);
            }
            // Evicted entirely while open: restart it with this state.
            None => {
                self.episodes.insert(
                    id,
                    Episode {
                        obs: VecDeque::from([obs]),
                        snapshots: VecDeque::from([snapshot]),
                    },
                );
            }
        }
        self.size += 1;
        self.evict();
        Ok(())
    }

    fn evict(&mut self) {
        while self.size > self.capacity {
            let Some(mut entry) = self.episodes.first_entry() else {
                break;
            };
            let ep = entry.get_mut();
            ep.obs.pop_front();
            ep.snapshots.pop_front();
            self.size -= 1;
            if ep.obs.is_empty() {
                entry.remove();
            }
        }
    }

    fn starts(&self, ep: &Episode) -> usize {
        (ep.obs.len() + 1).saturating_sub(self.segment_len)
    }

    /// Whether at least one full segment is stored.
    pub fn ready(&self) -> bool {
        self.episodes.values().any(|e| self.starts(e) > 0)
    }

    /// `count` segments drawn uniformly over all valid start positions.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Segment>> {
        let total: usize = self.episodes.values().map(|e| self.starts(e)).sum();
        if total == 0 {
            return Err(Error::Usage("replay holds no complete segment yet".into()));
        }
        (0..count)
            .map(|_| {
                let mut u = rng.random_range(0..total);
                for (&id, ep) in &self.episodes {
                    let n = self.starts(ep);
                    if u < n {
                        let range = u..u + self.segment_len;
                        return Ok(Segment {
                            episode: id,
                            start: u,
                            states: ep.obs.range(range.clone()).cloned().collect(),
                            snapshots: ep.snapshots.range(range).copied().collect(),
                            episode_ids: vec![id; self.segment_len],
                        });
                    }
                    u -= n;
                }
                unreachable!("segment index within total")
            })
            .collect()
    }

    /// Stores the buffer under `group` in a checkpoint.
    pub fn save_into(&self, ckpt: &mut Checkpoint, group: &str) -> Result<()> {
        let open: Vec<f64> = self.open.iter().map(|o| o.map_or(-1.0, |id| id as f64)).collect();
        ckpt.add(
            group,
            "meta",
            Matrix::row_vector(vec![
                self.capacity as f64,
                self.segment_len as f64,
                self.next_id as f64,
                self.size as f64,
            ]),
        )?;
        ckpt.add(group, "open", Matrix::row_vector(open))?;
        let ids: Vec<f64> = self.episodes.keys().map(|&k| k as f64).collect();
        ckpt.add(group, "ids", Matrix::row_vector(ids))?;
        for (id, ep) in &self.episodes {
            let rows: Vec<Vec<f64>> = ep.obs.iter().cloned().collect();
            ckpt.add(group, &format!("obs.{id}"), Matrix::from_rows(&rows))?;
            let snaps: Vec<Vec<f64>> = ep.snapshots.iter().map(snapshot_row).collect();
            ckpt.add(group, &format!("snap.{id}"), Matrix::from_rows(&snaps))?;
        }
        Ok(())
    }

    pub fn load_from(ckpt: &Checkpoint, group: &str) -> Result<Self> {
        let meta = ckpt.get(group, "meta")?.data().to_vec();
        if meta.len() != 4 {
            return Err(Error::Checkpoint(format!("{group}/meta has {} entries, expected 4", meta.len())));
        }
        let open = ckpt
            .get(group, "open")?
            .data()
            .iter()
            .map(|&v| (v >= 0.0).then_some(v as u64))
            .collect();
        let mut episodes = BTreeMap::new();
        for &id in ckpt.get(group, "ids")?.data() {
            let id = id as u64;
            let obs = ckpt.get(group, &format!("obs.{id}"))?;
            let snaps = ckpt.get(group, &format!("snap.{id}"))?;
            episodes.insert(
                id,
                Episode {
                    obs: obs.to_rows().into(),
                    snapshots: snaps.to_rows().iter().map(|r| snapshot_from_row(r)).collect(),
                },
            );
        }
        Ok(ReplayBuffer {
            capacity: meta[0] as usize,
            segment_len: meta[1] as usize,
            episodes,
            open,
            next_id: meta[2] as u64,
            size: meta[3] as usize,
        })
    }
}

pub(crate) fn snapshot_row(s: &EnvSnapshot) -> Vec<f64> {
    vec![
        s.body.pos[0],
        s.body.pos[1],
        s.body.vel[0],
        s.body.vel[1],
        s.t as f64,
        f64::from(u8::from(s.done)),
    ]
}

pub(crate) fn snapshot_from_row(r: &[f64]) -> EnvSnapshot {
    EnvSnapshot {
        body: Body {
            pos: [r[0], r[1]],
            vel: [r[2], r[3]],
        },
        t: r[4] as usize,
        done: r[5] != 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snap(t: usize) -> EnvSnapshot {
        EnvSnapshot {
            body: Body::at([t as f64, 0.0]),
            t,
            done: false,
        }
    }

    /// Fills the buffer with episodes of the given lengths (in states), the
    /// first observation component holding `episode * 1000 + t`.
    fn filled(lengths: &[usize], capacity: usize, seg: usize) -> ReplayBuffer {
        let mut rb = ReplayBuffer::new(capacity, seg, 2).unwrap();
        for (e, &n) in lengths.iter().enumerate() {
            let slot = e % 2;
            rb.begin_episode(slot, vec![(e * 1000) as f64], snap(0)).unwrap();
            for t in 1..n {
                rb.push(slot, vec![(e * 1000 + t) as f64], snap(t)).unwrap();
            }
        }
        rb
    }

    #[test]
    fn empty_buffer_is_not_ready() {
        let rb = ReplayBuffer::new(100, 5, 1).unwrap();
        assert!(!rb.ready());
        assert!(rb.sample(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let rb = filled(&[4, 4], 100, 5);
        assert!(!rb.ready());
    }

    #[test]
    fn push_without_episode_is_usage_error() {
        let mut rb = ReplayBuffer::new(100, 5, 1).unwrap();
        assert!(matches!(rb.push(0, vec![0.0], snap(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let rb = filled(&[7, 9, 3], 15, 4);
        let mut ck = Checkpoint::new();
        rb.save_into(&mut ck, "replay").unwrap();
        assert_eq!(ReplayBuffer::load_from(&ck, "replay").unwrap(), rb);
    }

    proptest! {
        #[test]
        fn segments_are_contiguous_single_episode_and_capacity_holds(
            lengths in prop::collection::vec(1usize..30, 1..8),
            capacity in 10usize..80,
            seed in 0u64..100,
        ) {
            let rb = filled(&lengths, capacity, 5);
            prop_assert!(rb.len() <= capacity);
            if rb.ready() {
                let segs = rb.sample(20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                for s in segs {
                    prop_assert_eq!(s.states.len(), 5);
                    prop_assert!(s.episode_ids.iter().all(|&i| i == s.episode));
                    let ep = (s.states[0][0] as usize) / 1000;
                    prop_assert_eq!(ep as u64, s.episode);
                    for w in s.states.windows(2) {
                        prop_assert_eq!(w[1][0] - w[0][0], 1.0);
                    }
                    for (st, sn) in s.states.iter().zip(&s.snapshots) {
                        prop_assert_eq!(st[0] as usize % 1000, sn.t);
                    }
                }
            }
        }
    }
}
