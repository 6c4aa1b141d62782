//! Rule-based rewards keyed on where the positive item lands in a ranking.
//!
//! The schedule is data: a list of inclusive rank bands with a reward each,
//! plus the reward for a positive that is missing or beyond the last band.
//! It is generic over the reward scalar so the same table can be evaluated
//! in floating point or in exact rationals.

use std::ops::Neg;

use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, AgentMemory, Ranker, RankingTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankBand<T> {
    /// First rank in the band, 1-based and inclusive.
    pub first: usize,
    /// Last rank in the band, inclusive.
    pub last: usize,
    pub reward: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSchedule<T> {
    pub bands: Vec<RankBand<T>>,
    /// Reward when the positive is unranked or ranked past the last band.
    pub absent: T,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule has no bands")]
    Empty,
    #[error("band {0} does not start right after the previous one (bands must tile ranks from 1)")]
    Gap(usize),
    #[error("band {0} has first > last")]
    Inverted(usize),
    #[error("band {0} pays more than a better-ranked band")]
    NotMonotone(usize),
}

impl<T: Copy + PartialOrd> RewardSchedule<T> {
    pub fn new(bands: Vec<RankBand<T>>, absent: T) -> Result<Self, ScheduleError> {
        let s = RewardSchedule { bands, absent };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.bands.is_empty() {
            return Err(ScheduleError::Empty);
        }
        let mut next = 1;
        for (i, b) in self.bands.iter().enumerate() {
            if b.first > b.last {
                return Err(ScheduleError::Inverted(i));
            }
            if b.first != next {
                return Err(ScheduleError::Gap(i));
            }
            if i > 0 && b.reward > self.bands[i - 1].reward {
                return Err(ScheduleError::NotMonotone(i));
            }
            next = b.last + 1;
        }
        if self.absent > self.bands[self.bands.len() - 1].reward {
            return Err(ScheduleError::NotMonotone(self.bands.len()));
        }
        Ok(())
    }

    /// Last rank covered by a band.
    pub fn horizon(&self) -> usize {
        self.bands.last().map_or(0, |b| b.last)
    }

    /// Reward for a 1-based rank; `None` means the positive was not ranked.
    pub fn reward(&self, rank: Option<usize>) -> T {
        rank.and_then(|r| self.bands.iter().find(|b| (b.first..=b.last).contains(&r))).map_or(self.absent, |b| b.reward)
    }
}

impl<T: Copy + PartialOrd + Num + Neg<Output = T>> RewardSchedule<T> {
    /// +1 for rank 1, +0.5 for 2–5, 0 for 6–10, −0.5 for 11–20, −1 otherwise.
    pub fn standard() -> Self {
        let one = T::one();
        let half = one / (one + one);
        RewardSchedule {
            bands: vec![
                RankBand { first: 1, last: 1, reward: one },
                RankBand { first: 2, last: 5, reward: half },
                RankBand { first: 6, last: 10, reward: T::zero() },
                RankBand { first: 11, last: 20, reward: -half },
            ],
            absent: -one,
        }
    }
}

impl Default for RewardSchedule<f64> {
    fn default() -> Self {
        Self::standard()
    }
}

pub fn ranking_reward<T: Copy + PartialOrd>(rank: Option<usize>, schedule: &RewardSchedule<T>) -> T {
    schedule.reward(rank)
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("follow-up task has no positive item")]
    MissingPositive,
    #[error("follow-up ranking failed: {0}")]
    Ranker(#[from] AgentError),
}

/// The follow-up task used to score a memory update: the triggering task's
/// candidates and positive, ranked from the updated memory.
pub fn followup_task(triggering: &RankingTask, updated_memory: &AgentMemory) -> RankingTask {
    RankingTask { memory: updated_memory.clone(), ..triggering.clone() }
}

/// Scores a memory update by running `ranker` on `followup` with the updated
/// memory and applying the ranking schedule to the positive's rank.
pub fn reflection_reward<T: Copy + PartialOrd>(
    updated_memory: &AgentMemory,
    followup: &RankingTask,
    ranker: &dyn Ranker,
    schedule: &RewardSchedule<T>,
    nonce: u64,
) -> Result<T, RewardError> {
    let positive = followup.positive_item_id.as_ref().ok_or(RewardError::MissingPositive)?;
    let task = followup_task(followup, updated_memory);
    let out = ranker.rank(&task, nonce)?;
    Ok(schedule.reward(out.rank_of(positive)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::RankingOutput;
    use crate::corpus::{Item, ItemId, UserRecord};
    use num_rational::Ratio;

    #[test]
    fn standard_bands() {
        let s = RewardSchedule::<f64>::standard();
        assert_eq!(ranking_reward(Some(1), &s), 1.0);
        assert_eq!(ranking_reward(Some(3), &s), 0.5);
        assert_eq!(ranking_reward(Some(7), &s), 0.0);
        assert_eq!(ranking_reward(Some(15), &s), -0.5);
        assert_eq!(ranking_reward(None, &s), -1.0);
        assert_eq!(ranking_reward(Some(21), &s), -1.0);
        assert_eq!(s.horizon(), 20);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn band_edges() {
        let s = RewardSchedule::<f64>::standard();
        let table = [(1, 1.0), (2, 0.5), (5, 0.5), (6, 0.0), (10, 0.0), (11, -0.5), (20, -0.5)];
        for (rank, want) in table {
            assert_eq!(s.reward(Some(rank)), want, "rank {rank}");
        }
    }

    #[test]
    fn uniform_expectation_is_exactly_minus_a_tenth() {
        // Enumerate all 20 equally likely positions in exact arithmetic.
        let s = RewardSchedule::<Ratio<i64>>::standard();
        let total: Ratio<i64> = (1..=20).map(|r| s.reward(Some(r))).sum();
        assert_eq!(total / Ratio::from_integer(20), Ratio::new(-1, 10));
    }

    #[test]
    fn f32_schedule() {
        let s = RewardSchedule::<f32>::standard();
        assert_eq!(s.reward(Some(4)), 0.5f32);
    }

    #[test]
    fn invalid_schedules() {
        let b = |first, last, reward| RankBand { first, last, reward };
        assert_eq!(RewardSchedule::<f64>::new(vec![], -1.0), Err(ScheduleError::Empty));
        assert_eq!(RewardSchedule::new(vec![b(2, 3, 1.0)], -1.0), Err(ScheduleError::Gap(0)));
        assert_eq!(RewardSchedule::new(vec![b(1, 1, 0.0), b(2, 3, 1.0)], -1.0), Err(ScheduleError::NotMonotone(1)));
        assert_eq!(RewardSchedule::new(vec![b(1, 0, 0.0)], -1.0), Err(ScheduleError::Inverted(0)));
        assert_eq!(RewardSchedule::new(vec![b(1, 1, 0.0)], 2.0), Err(ScheduleError::NotMonotone(1)));
    }

    #[test]
    fn schedule_round_trips_through_json() {
        let s = RewardSchedule::<f64>::standard();
        let back: RewardSchedule<f64> = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    struct Fixed(Vec<&'static str>);

    impl Ranker for Fixed {
        fn rank(&self, _: &RankingTask, _: u64) -> Result<RankingOutput, AgentError> {
            Ok(RankingOutput::from_order(self.0.iter().map(|s| ItemId((*s).into()))))
        }
        fn label(&self) -> String {
            "fixed".into()
        }
    }

    struct SeesMemory;

    impl Ranker for SeesMemory {
        fn rank(&self, task: &RankingTask, _: u64) -> Result<RankingOutput, AgentError> {
            let mut ids: Vec<ItemId> = task.candidates.iter().map(|c| c.item_id.clone()).collect();
            if task.memory.preference_description.contains("likes b") {
                ids.reverse();
            }
            Ok(RankingOutput::from_order(ids))
        }
        fn label(&self) -> String {
            "sees-memory".into()
        }
    }

    fn task() -> RankingTask {
        RankingTask {
            memory: AgentMemory::new(UserRecord::anonymous("u")),
            candidates: vec![Item::new("a", "A"), Item::new("b", "B")],
            positive_item_id: Some(ItemId("b".into())),
        }
    }

    #[test]
    fn reflection_reward_composes_with_bands() {
        let s = RewardSchedule::<f64>::standard();
        let m = AgentMemory::new(UserRecord::anonymous("u"));
        assert_eq!(reflection_reward(&m, &task(), &Fixed(vec!["b", "a"]), &s, 0).unwrap(), 1.0);
        assert_eq!(reflection_reward(&m, &task(), &Fixed(vec!["a"]), &s, 0).unwrap(), -1.0);
    }

    #[test]
    fn reflection_reward_uses_updated_memory() {
        let s = RewardSchedule::<f64>::standard();
        let mut m = AgentMemory::new(UserRecord::anonymous("u"));
        assert_eq!(reflection_reward(&m, &task(), &SeesMemory, &s, 0).unwrap(), 0.5);
        m.preference_description = "likes b".into();
        assert_eq!(reflection_reward(&m, &task(), &SeesMemory, &s, 0).unwrap(), 1.0);
        let mut no_pos = task();
        no_pos.positive_item_id = None;
        assert_eq!(reflection_reward(&m, &no_pos, &SeesMemory, &s, 0), Err(RewardError::MissingPositive));
    }
}
