//! Event-sourced annotation tasks.
//!
//! Every state change is an [`Event`]; a [`TaskBoard`] is the fold of its
//! event log, so replaying a stored log reproduces the board exactly.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{parse_truth, PlateLabel};
use crate::vote::{vote, VoteKind, VoteOutcome};
use crate::Error;

pub const VOTES_NEEDED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    NeedsReview,
    Resolved,
}

impl TaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskStatus::Pending => "pending",
            TaskStatus::NeedsReview => "needs_review",
            TaskStatus::Resolved => "resolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator: String,
    pub label: PlateLabel,
}

/// Reviewer decision that settled a conflict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewOverride {
    pub reviewer: String,
    pub label: PlateLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub image_path: String,
    pub submissions: Vec<Submission>,
    pub status: TaskStatus,
    pub vote: Option<VoteOutcome>,
    pub resolved_label: Option<PlateLabel>,
    pub review: Option<ReviewOverride>,
}

impl AnnotationTask {
    fn new(id: String, image_path: String) -> Self {
        Self {
            id,
            image_path,
            submissions: Vec::new(),
            status: TaskStatus::Pending,
            vote: None,
            resolved_label: None,
            review: None,
        }
    }

    pub fn submitted_by(&self, annotator: &str) -> bool {
        self.submissions.iter().any(|s| s.annotator == annotator)
    }

    pub fn submission_of(&self, annotator: &str) -> Option<&PlateLabel> {
        self.submissions
            .iter()
            .find(|s| s.annotator == annotator)
            .map(|s| &s.label)
    }

    fn wrong_status(&self) -> Error {
        Error::WrongStatus {
            task: self.id.clone(),
            status: self.status.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TaskAdded {
        task: String,
        image_path: String,
    },
    Submitted {
        task: String,
        annotator: String,
        label: PlateLabel,
    },
    Voted {
        task: String,
        outcome: VoteOutcome,
    },
    Resolved {
        task: String,
        reviewer: String,
        label: PlateLabel,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBoard {
    tasks: BTreeMap<String, AnnotationTask>,
}

impl TaskBoard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self, Error> {
        let mut board = Self::new();
        for e in events {
            board.apply(e)?;
        }
        Ok(board)
    }

    pub fn get(&self, id: &str) -> Option<&AnnotationTask> {
        self.tasks.get(id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }

    pub fn with_status(&self, status: TaskStatus) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values().filter(move |t| t.status == status)
    }

    fn task_mut(&mut self, id: &str) -> Result<&mut AnnotationTask, Error> {
        self.tasks
            .get_mut(id)
            .ok_or_else(|| Error::UnknownTask(String::from(id)))
    }

    /// Applies one event after checking it is legal in the current state.
    pub fn apply(&mut self, event: &Event) -> Result<(), Error> {
        match event {
            Event::TaskAdded { task, image_path } => {
                if self.tasks.contains_key(task) {
                    return Err(Error::DuplicateTask(task.clone()));
                }
                self.tasks
                    .insert(task.clone(), AnnotationTask::new(task.clone(), image_path.clone()));
            }
            Event::Submitted {
                task,
                annotator,
                label,
            } => {
                let t = self.task_mut(task)?;
                if t.status != TaskStatus::Pending || t.submissions.len() >= VOTES_NEEDED {
                    return Err(t.wrong_status());
                }
                if t.submitted_by(annotator) {
                    return Err(Error::DuplicateSubmission {
                        task: task.clone(),
                        annotator: annotator.clone(),
                    });
                }
                if label.is_empty() {
                    return Err(Error::EmptyLabel);
                }
                t.submissions.push(Submission {
                    annotator: annotator.clone(),
                    label: label.clone(),
                });
            }
            Event::Voted { task, outcome } => {
                let t = self.task_mut(task)?;
                if t.status != TaskStatus::Pending || t.submissions.len() != VOTES_NEEDED {
                    return Err(t.wrong_status());
                }
                t.status = match outcome.kind {
                    VoteKind::Conflict => TaskStatus::NeedsReview,
                    VoteKind::Unanimous | VoteKind::Majority => TaskStatus::Resolved,
                };
                t.resolved_label = outcome.label.clone();
                t.vote = Some(outcome.clone());
            }
            Event::Resolved {
                task,
                reviewer,
                label,
            } => {
                let t = self.task_mut(task)?;
                if t.status != TaskStatus::NeedsReview {
                    return Err(t.wrong_status());
                }
                if label.is_empty() {
                    return Err(Error::EmptyLabel);
                }
                t.status = TaskStatus::Resolved;
                t.resolved_label = Some(label.clone());
                t.review = Some(ReviewOverride {
                    reviewer: reviewer.clone(),
                    label: label.clone(),
                });
            }
        }
        Ok(())
    }

    fn commit(&mut self, events: Vec<Event>) -> Result<Vec<Event>, Error> {
        for e in &events {
            self.apply(e)?;
        }
        Ok(events)
    }

    pub fn add_task(&mut self, id: &str, image_path: &str) -> Result<Vec<Event>, Error> {
        self.commit(vec![Event::TaskAdded {
            task: String::from(id),
            image_path: String::from(image_path),
        }])
    }

    /// Records a label; the third submission also records the vote.
    /// Returns the events to persist, in order.
    pub fn submit(&mut self, task: &str, annotator: &str, raw: &str) -> Result<Vec<Event>, Error> {
        let label = parse_truth(raw)?;
        let submitted = Event::Submitted {
            task: String::from(task),
            annotator: String::from(annotator),
            label,
        };
        self.apply(&submitted)?;
        let mut events = vec![submitted];
        let t = &self.tasks[task];
        if t.submissions.len() == VOTES_NEEDED {
            let labels: Vec<PlateLabel> = t.submissions.iter().map(|s| s.label.clone()).collect();
            let voted = Event::Voted {
                task: String::from(task),
                outcome: vote(&labels)?,
            };
            self.apply(&voted)?;
            events.push(voted);
        }
        Ok(events)
    }

    pub fn resolve(&mut self, task: &str, raw: &str, reviewer: &str) -> Result<Vec<Event>, Error> {
        let label = parse_truth(raw)?;
        self.commit(vec![Event::Resolved {
            task: String::from(task),
            reviewer: String::from(reviewer),
            label,
        }])
    }

    /// First pending task (by id) the annotator has not labeled yet.
    pub fn next_task(&self, annotator: &str) -> Option<&AnnotationTask> {
        self.tasks.values().find(|t| {
            t.status == TaskStatus::Pending
                && t.submissions.len() < VOTES_NEEDED
                && !t.submitted_by(annotator)
        })
    }

    /// `(id, image_path, label)` for every task, or the ids still unresolved.
    pub fn export(&self) -> Result<Vec<(String, String, PlateLabel)>, Vec<String>> {
        let unresolved: Vec<String> = self
            .tasks
            .values()
            .filter(|t| t.status != TaskStatus::Resolved)
            .map(|t| t.id.clone())
            .collect();
        if !unresolved.is_empty() {
            return Err(unresolved);
        }
        Ok(self
            .tasks
            .values()
            .filter_map(|t| {
                t.resolved_label
                    .clone()
                    .map(|l| (t.id.clone(), t.image_path.clone(), l))
            })
            .collect())
    }

    /// Checks every resolved label against its submissions and review record.
    pub fn audit(&self) -> Result<(), String> {
        for t in self.tasks.values() {
            if t.status != TaskStatus::Resolved {
                continue;
            }
            let expected = match &t.review {
                Some(r) => Some(r.label.clone()),
                None => {
                    let labels: Vec<PlateLabel> =
                        t.submissions.iter().map(|s| s.label.clone()).collect();
                    vote(&labels).ok().and_then(|o| o.label)
                }
            };
            let same = match (&expected, &t.resolved_label) {
                (Some(a), Some(b)) => a.chars() == b.chars(),
                _ => false,
            };
            if !same {
                return Err(t.id.clone());
            }
        }
        Ok(())
    }
}
