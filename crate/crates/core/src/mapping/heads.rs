use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pass of the hybrid head allocation: `h_p` heads placed side by side,
/// each interleaved over `n_ch` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadRound {
    pub first_head: u64,
    pub h_p: u64,
    pub n_ch: u64,
}

impl HeadRound {
    pub fn heads(&self) -> std::ops::Range<u64> {
        self.first_head..self.first_head + self.h_p
    }

    pub fn contains(&self, head: u64) -> bool {
        self.heads().contains(&head)
    }

    /// Channel of dimension `dim` of `head`.
    pub fn channel(&self, head: u64, dim: u64) -> u64 {
        (head - self.first_head) * self.n_ch + dim % self.n_ch
    }

    /// Channels serving `head` in this round.
    pub fn channels_of(&self, head: u64) -> std::ops::Range<u64> {
        let base = (head - self.first_head) * self.n_ch;
        base..base + self.n_ch
    }

    /// Inverse of [`HeadRound::channel`]: the `k`-th dimension stored on
    /// `channel`.
    pub fn coordinate(&self, channel: u64, k: u64) -> (u64, u64) {
        (
            self.first_head + channel / self.n_ch,
            channel % self.n_ch + k * self.n_ch,
        )
    }
}

/// Slice entry: `(head, dim)` of a Q/K/V output dimension.
pub type SliceEntry = (u32, u32);

/// Hybrid head-parallel / channel-interleaved placement of one Q, K or V
/// weight matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAllocation {
    pub n_heads: u64,
    pub n_channels: u64,
    pub n_cores: u64,
    pub d_k: u64,
    pub rounds: Vec<HeadRound>,
    /// `slices[round][channel]`: output dimensions held by that channel in
    /// that round, in placement order.
    pub slices: Vec<Vec<Vec<SliceEntry>>>,
}

/// Largest power of two not above `x` (`x >= 1`).
pub fn pow2_floor(x: u64) -> u64 {
    debug_assert!(x >= 1);
    1 << (63 - x.leading_zeros())
}

pub fn allocate_qkv_heads(n_heads: u64, n_channels: u64, n_cores: u64, d_emb: u64) -> Result<HeadAllocation> {
    if n_heads == 0 || n_channels == 0 || n_cores == 0 {
        return Err(Error::InvalidRequest(
            "head allocation needs at least one head, channel and core".into(),
        ));
    }
    if d_emb % n_heads != 0 || d_emb == 0 {
        return Err(Error::InvalidModel(format!(
            "d_emb {d_emb} is not divisible by {n_heads} heads"
        )));
    }
    let d_k = d_emb / n_heads;
    let mut rounds = Vec::new();
    let mut slices = Vec::new();
    let mut h_idx = 0;
    let mut h_rem = n_heads;
    while h_rem > 0 {
        let h_r = h_rem.min(n_channels).min(n_cores);
        let h_p = pow2_floor(h_r);
        if n_channels % h_p != 0 {
            return Err(Error::ChannelDivisibility {
                channels: n_channels,
                heads_per_round: h_p,
            });
        }
        let round = HeadRound {
            first_head: h_idx,
            h_p,
            n_ch: n_channels / h_p,
        };
        let mut per_channel = vec![Vec::with_capacity(d_k.div_ceil(round.n_ch) as usize); n_channels as usize];
        for h in round.heads() {
            for i in 0..d_k {
                per_channel[round.channel(h, i) as usize].push((h as u32, i as u32));
            }
        }
        rounds.push(round);
        slices.push(per_channel);
        h_idx += h_p;
        h_rem -= h_p;
    }
    Ok(HeadAllocation {
        n_heads,
        n_channels,
        n_cores,
        d_k,
        rounds,
        slices,
    })
}

impl HeadAllocation {
    pub fn round_of(&self, head: u64) -> Option<usize> {
        self.rounds.iter().position(|r| r.contains(head))
    }

    /// Output dimensions each channel holds across all rounds.
    pub fn channel_dims(&self) -> Vec<u64> {
        let mut out = vec![0; self.n_channels as usize];
        for round in &self.slices {
            for (c, s) in round.iter().enumerate() {
                out[c] += s.len() as u64;
            }
        }
        out
    }

    /// Invariant check; every message names the offending head or channel.
    pub fn violations(&self, label: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut seen_round = vec![None::<usize>; self.n_heads as usize];
        for (ri, r) in self.rounds.iter().enumerate() {
            if !r.h_p.is_power_of_two() {
                v.push(format!("{label} round {ri}: h_p {} is not a power of two", r.h_p));
            }
            if r.h_p * r.n_ch > self.n_channels {
                v.push(format!(
                    "{label} round {ri}: {} heads x {} channels exceeds {} channels",
                    r.h_p, r.n_ch, self.n_channels
                ));
            }
            for h in r.heads() {
                match seen_round.get_mut(h as usize) {
                    None => v.push(format!("{label}: head {h} out of range")),
                    Some(slot @ None) => *slot = Some(ri),
                    Some(Some(prev)) => v.push(format!(
                        "{label}: head {h} placed twice (rounds {prev} and {ri})"
                    )),
                }
            }
        }
        for (h, r) in seen_round.iter().enumerate() {
            if r.is_none() {
                v.push(format!("{label}: head {h} never placed"));
            }
        }
        if self.slices.len() != self.rounds.len() {
            v.push(format!("{label}: slice table does not match round count"));
            return v;
        }
        for (ri, (r, chans)) in self.rounds.iter().zip(&self.slices).enumerate() {
            let mut owner = vec![None::<u32>; chans.len()];
            for (c, entries) in chans.iter().enumerate() {
                for (k, &(h, i)) in entries.iter().enumerate() {
                    let (h, i) = (h as u64, i as u64);
                    if !r.contains(h) || i >= self.d_k || r.channel(h, i) != c as u64 {
                        v.push(format!(
                            "{label} round {ri}: channel {c} holds head {h} dim {i} off its interleave"
                        ));
                        continue;
                    }
                    if r.coordinate(c as u64, k as u64) != (h, i) {
                        v.push(format!(
                            "{label} round {ri}: channel {c} slot {k} out of order for head {h}"
                        ));
                    }
                    match owner[c] {
                        None => owner[c] = Some(h as u32),
                        Some(o) if o as u64 != h => v.push(format!(
                            "{label} round {ri}: channel {c} shared by heads {o} and {h}"
                        )),
                        _ => {}
                    }
                }
            }
            let held: usize = chans.iter().map(Vec::len).sum();
            if held as u64 != r.h_p * self.d_k {
                v.push(format!(
                    "{label} round {ri}: {held} dimensions placed, expected {}",
                    r.h_p * self.d_k
                ));
            }
        }
        v
    }
}

/// One group of heads processed concurrently on the SRAM cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorePhase {
    pub first_head: u64,
    pub n_heads: u64,
    /// Cores cooperating on each head.
    pub tp_degree: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreAssignment {
    pub n_heads: u64,
    pub n_cores: u64,
    pub phases: Vec<CorePhase>,
}

pub fn assign_heads_to_cores(n_heads: u64, n_cores: u64) -> Result<CoreAssignment> {
    if n_heads == 0 || n_cores == 0 {
        return Err(Error::InvalidRequest(
            "core assignment needs at least one head and one core".into(),
        ));
    }
    let mut phases = Vec::new();
    let mut first = 0;
    while first < n_heads {
        let k = (n_heads - first).min(n_cores);
        phases.push(CorePhase {
            first_head: first,
            n_heads: k,
            tp_degree: pow2_floor(n_cores / k),
        });
        first += k;
    }
    Ok(CoreAssignment {
        n_heads,
        n_cores,
        phases,
    })
}

impl CoreAssignment {
    pub fn phase_of(&self, head: u64) -> Option<(usize, &CorePhase)> {
        self.phases
            .iter()
            .enumerate()
            .find(|(_, p)| (p.first_head..p.first_head + p.n_heads).contains(&head))
    }

    /// Cores working on `head`.
    pub fn cores_of(&self, head: u64) -> std::ops::Range<u64> {
        let (_, p) = self.phase_of(head).expect("head outside assignment");
        let slot = head - p.first_head;
        slot * p.tp_degree..(slot + 1) * p.tp_degree
    }

    pub fn tp_of(&self, head: u64) -> u64 {
        self.phase_of(head).map_or(1, |(_, p)| p.tp_degree)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut next = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if p.first_head != next {
                v.push(format!("core phase {i}: starts at head {} instead of {next}", p.first_head));
            }
            if p.tp_degree * p.n_heads > self.n_cores {
                v.push(format!(
                    "core phase {i}: {} heads x tp {} exceeds {} cores",
                    p.n_heads, p.tp_degree, self.n_cores
                ));
            }
            next = p.first_head + p.n_heads;
        }
        if next != self.n_heads {
            v.push(format!("core assignment covers {next} of {} heads", self.n_heads));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(a: &HeadAllocation) -> Vec<(u64, u64, u64)> {
        a.rounds.iter().map(|r| (r.first_head, r.h_p, r.n_ch)).collect()
    }

    #[test]
    fn sixteen_heads_sixteen_channels() {
        let a = allocate_qkv_heads(16, 16, 32, 1024).unwrap();
        assert_eq!(summary(&a), vec![(0, 16, 1)]);
        for h in 0..16u32 {
            let held = &a.slices[0][h as usize];
            assert_eq!(held.len(), 64);
            assert!(held.iter().all(|&(hh, _)| hh == h));
        }
    }

    #[test]
    fn sixteen_heads_sixty_four_channels() {
        let a = allocate_qkv_heads(16, 64, 32, 1024).unwrap();
        assert_eq!(summary(&a), vec![(0, 16, 4)]);
        let dims = |c: usize| a.slices[0][c].iter().map(|&(_, i)| i).collect::<Vec<_>>();
        assert_eq!(dims(0)[..4], [0, 4, 8, 12]);
        assert_eq!(dims(1)[..3], [1, 5, 9]);
        assert!(a.slices[0][0].iter().all(|&(h, _)| h == 0));
        assert!(a.slices[0][4].iter().all(|&(h, _)| h == 1));
    }

    #[test]
    fn fifty_six_heads_three_rounds() {
        let a = allocate_qkv_heads(56, 64, 32, 7168).unwrap();
        assert_eq!(summary(&a), vec![(0, 32, 2), (32, 16, 4), (48, 8, 8)]);
        assert!(a.violations("k").is_empty());
    }

    #[test]
    fn opt13b_rounds() {
        let a = allocate_qkv_heads(40, 64, 32, 5120).unwrap();
        assert_eq!(summary(&a), vec![(0, 32, 2), (32, 8, 8)]);
        // Every channel holds the same number of dimensions overall.
        let dims = a.channel_dims();
        assert!(dims.iter().all(|&d| d == 80), "{dims:?}");
    }

    #[test]
    fn non_power_of_two_channels() {
        let err = allocate_qkv_heads(16, 24, 32, 1024).unwrap_err();
        assert!(matches!(
            err,
            Error::ChannelDivisibility {
                channels: 24,
                heads_per_round: 16
            }
        ));
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn duplicated_head_reported() {
        let mut a = allocate_qkv_heads(40, 64, 32, 5120).unwrap();
        a.rounds[1].first_head = 31;
        let v = a.violations("K");
        assert!(v.iter().any(|m| m.contains("head 31 placed twice")), "{v:?}");
        assert!(v.iter().any(|m| m.contains("head 39 never placed")), "{v:?}");
    }

    #[test]
    fn core_assignment_examples() {
        let a = assign_heads_to_cores(32, 32).unwrap();
        assert_eq!(a.phases, vec![CorePhase { first_head: 0, n_heads: 32, tp_degree: 1 }]);
        assert_eq!(a.cores_of(7), 7..8);
        let a = assign_heads_to_cores(16, 32).unwrap();
        assert_eq!(a.tp_of(3), 2);
        assert_eq!(a.cores_of(3), 6..8);
        let a = assign_heads_to_cores(40, 32).unwrap();
        assert_eq!(
            a.phases,
            vec![
                CorePhase { first_head: 0, n_heads: 32, tp_degree: 1 },
                CorePhase { first_head: 32, n_heads: 8, tp_degree: 4 },
            ]
        );
        assert_eq!(a.cores_of(33), 4..8);
        let a = assign_heads_to_cores(12, 32).unwrap();
        assert_eq!(a.tp_of(0), 2, "32/12 rounds down to a power of two");
        assert!(a.violations().is_empty());
    }

    #[test]
    fn pow2_floor_values() {
        assert_eq!(pow2_floor(1), 1);
        assert_eq!(pow2_floor(24), 16);
        assert_eq!(pow2_floor(64), 64);
    }
}
