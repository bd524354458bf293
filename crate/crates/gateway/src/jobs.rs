use std::fmt;

use anonymizer_core::pipeline::BodyChoice;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    pub fn can_advance_to(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Queued => "queued",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("job {job_id}: illegal transition {from} -> {to}")]
pub struct IllegalTransition {
    pub job_id: String,
    pub from: JobState,
    pub to: JobState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub state: JobState,
    /// Every state the job has been in, oldest first.
    pub history: Vec<JobState>,
    pub request_digest: String,
    pub image_id: String,
    pub seed: u64,
    pub choices: Vec<BodyChoice>,
    /// Blob id of the result PNG once done.
    pub result_id: Option<String>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl Job {
    pub fn new(job_id: String, request_digest: String, image_id: String, seed: u64, choices: Vec<BodyChoice>) -> Self {
        Self {
            job_id,
            state: JobState::Queued,
            history: vec![JobState::Queued],
            request_digest,
            image_id,
            seed,
            choices,
            result_id: None,
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn advance(&mut self, next: JobState) -> Result<(), IllegalTransition> {
        if !self.state.can_advance_to(next) {
            return Err(IllegalTransition { job_id: self.job_id.clone(), from: self.state, to: next });
        }
        self.state = next;
        self.history.push(next);
        Ok(())
    }

    pub fn fail(&mut self, error: impl Into<String>) -> Result<(), IllegalTransition> {
        self.advance(JobState::Failed)?;
        self.error = Some(error.into());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const STATES: [JobState; 4] = [JobState::Queued, JobState::Running, JobState::Done, JobState::Failed];

    fn job() -> Job {
        Job::new("j".into(), "d".into(), "i".into(), 0, vec![])
    }

    #[test]
    fn happy_path() {
        let mut j = job();
        j.advance(JobState::Running).unwrap();
        j.advance(JobState::Done).unwrap();
        assert_eq!(j.history, vec![JobState::Queued, JobState::Running, JobState::Done]);
        assert!(j.advance(JobState::Running).is_err());
    }

    #[test]
    fn serializes_lowercase() {
        let j = job();
        let v = serde_json::to_value(&j).unwrap();
        assert_eq!(v["state"], "queued");
    }

    proptest! {
        // Any sequence of attempted transitions leaves a history that is a
        // prefix of queued→running→{done|failed}.
        #[test]
        fn history_is_always_legal(steps in prop::collection::vec(0usize..4, 0..12)) {
            let mut j = job();
            for s in steps {
                let _ = j.advance(STATES[s]);
            }
            let h = &j.history;
            prop_assert_eq!(h[0], JobState::Queued);
            prop_assert!(h.len() <= 3);
            if h.len() >= 2 {
                prop_assert_eq!(h[1], JobState::Running);
            }
            if h.len() == 3 {
                prop_assert!(h[2].is_terminal());
            }
            prop_assert_eq!(*h.last().unwrap(), j.state);
        }
    }
}
