use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use qask_core::agent::{AgentError, EpisodeStart, Oracle, OracleRequest, Timed};
use qask_core::model::{ImageRef, InteractionContext};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::ImageStore;
use crate::remote::seconds;

pub const DEFAULT_HUMAN_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    AwaitingAnswer,
    Done,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BridgeError {
    #[error("no session `{0}`")]
    NotFound(String),
    #[error("session `{0}` has no pending question")]
    NoPendingQuestion(String),
    #[error("session `{0}` already has a pending question")]
    AlreadyPending(String),
    #[error("session `{0}` is closed")]
    Closed(String),
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("oracle timeout")]
    Timeout,
}

#[derive(Debug)]
struct Session {
    id: String,
    episode_id: String,
    oracle_id: String,
    description: String,
    target_image: ImageRef,
    target_png: Vec<u8>,
    pending_question: Option<String>,
    answer: Option<String>,
    transcript: InteractionContext,
    state: SessionState,
}

/// What the console is allowed to see: no reasoning, no distractors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub episode_id: String,
    pub oracle_id: String,
    pub description: String,
    pub target_image_url: String,
    pub pending_question: Option<String>,
    pub transcript: InteractionContext,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub episode_id: String,
    pub state: SessionState,
    pub pending: bool,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            episode_id: self.episode_id.clone(),
            oracle_id: self.oracle_id.clone(),
            description: self.description.clone(),
            target_image_url: format!("/api/sessions/{}/target.png", self.id),
            pending_question: self.pending_question.clone(),
            transcript: self.transcript.clone(),
            state: self.state,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    sessions: Mutex<BTreeMap<String, Session>>,
    changed: Condvar,
}

/// Thread-safe registry of human-oracle sessions.
#[derive(Debug, Clone, Default)]
pub struct SessionStore(Arc<Inner>);

impl SessionStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(
        &self,
        oracle_id: &str,
        episode_id: &str,
        description: &str,
        target_image: &ImageRef,
        target_png: Vec<u8>,
    ) -> String {
        let mut sessions = self.0.sessions.lock().unwrap();
        let base = format!("{oracle_id}--{episode_id}");
        let mut id = base.clone();
        let mut k = 1;
        while sessions.contains_key(&id) {
            k += 1;
            id = format!("{base}--{k}");
        }
        sessions.insert(
            id.clone(),
            Session {
                id: id.clone(),
                episode_id: episode_id.to_string(),
                oracle_id: oracle_id.to_string(),
                description: description.to_string(),
                target_image: target_image.clone(),
                target_png,
                pending_question: None,
                answer: None,
                transcript: InteractionContext::new(),
                state: SessionState::Idle,
            },
        );
        self.0.changed.notify_all();
        id
    }

    /// Publishes `question` and blocks until an answer arrives or `timeout` passes.
    pub fn ask(&self, id: &str, question: &str, timeout: Duration) -> Result<String, BridgeError> {
        let mut sessions = self.0.sessions.lock().unwrap();
        let s = sessions.get_mut(id).ok_or_else(|| BridgeError::NotFound(id.into()))?;
        match s.state {
            SessionState::Idle => {}
            SessionState::AwaitingAnswer => return Err(BridgeError::AlreadyPending(id.into())),
            SessionState::Done => return Err(BridgeError::Closed(id.into())),
        }
        s.pending_question = Some(question.to_string());
        s.answer = None;
        s.state = SessionState::AwaitingAnswer;
        self.0.changed.notify_all();

        let deadline = Instant::now() + timeout;
        loop {
            let s = sessions.get_mut(id).ok_or_else(|| BridgeError::NotFound(id.into()))?;
            if let Some(a) = s.answer.take() {
                return Ok(a);
            }
            let now = Instant::now();
            if now >= deadline {
                s.pending_question = None;
                s.state = SessionState::Idle;
                self.0.changed.notify_all();
                return Err(BridgeError::Timeout);
            }
            sessions = self.0.changed.wait_timeout(sessions, deadline - now).unwrap().0;
        }
    }

    /// Hands an answer to the blocked `ask`. Trailing whitespace is dropped.
    pub fn submit(&self, id: &str, answer: &str) -> Result<(), BridgeError> {
        let answer = answer.trim_end();
        if answer.trim().is_empty() {
            return Err(BridgeError::EmptyAnswer);
        }
        let mut sessions = self.0.sessions.lock().unwrap();
        let s = sessions.get_mut(id).ok_or_else(|| BridgeError::NotFound(id.into()))?;
        if s.state != SessionState::AwaitingAnswer {
            return Err(BridgeError::NoPendingQuestion(id.into()));
        }
        let q = s.pending_question.take().unwrap_or_default();
        let _ = s.transcript.push(q, answer);
        s.answer = Some(answer.to_string());
        s.state = SessionState::Idle;
        self.0.changed.notify_all();
        Ok(())
    }

    pub fn close(&self, id: &str) {
        if let Some(s) = self.0.sessions.lock().unwrap().get_mut(id) {
            s.state = SessionState::Done;
            s.pending_question = None;
        }
        self.0.changed.notify_all();
    }

    pub fn view(&self, id: &str) -> Result<SessionView, BridgeError> {
        let sessions = self.0.sessions.lock().unwrap();
        sessions.get(id).map(Session::view).ok_or_else(|| BridgeError::NotFound(id.into()))
    }

    pub fn list(&self) -> Vec<SessionSummary> {
        self.0
            .sessions
            .lock()
            .unwrap()
            .values()
            .map(|s| SessionSummary {
                id: s.id.clone(),
                episode_id: s.episode_id.clone(),
                state: s.state,
                pending: s.pending_question.is_some(),
            })
            .collect()
    }

    pub fn target_png(&self, id: &str) -> Result<Vec<u8>, BridgeError> {
        let sessions = self.0.sessions.lock().unwrap();
        sessions
            .get(id)
            .map(|s| s.target_png.clone())
            .ok_or_else(|| BridgeError::NotFound(id.into()))
    }

    pub fn target_ref(&self, id: &str) -> Result<ImageRef, BridgeError> {
        let sessions = self.0.sessions.lock().unwrap();
        sessions
            .get(id)
            .map(|s| s.target_image.clone())
            .ok_or_else(|| BridgeError::NotFound(id.into()))
    }

    /// Blocks until some session has a pending question; returns its id.
    pub fn wait_for_pending(&self, timeout: Duration) -> Option<String> {
        let deadline = Instant::now() + timeout;
        let mut sessions = self.0.sessions.lock().unwrap();
        loop {
            if let Some(s) = sessions.values().find(|s| s.state == SessionState::AwaitingAnswer) {
                return Some(s.id.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            sessions = self.0.changed.wait_timeout(sessions, deadline - now).unwrap().0;
        }
    }
}

/// Oracle answered by a person through the console.
pub struct HumanOracle {
    id: String,
    store: SessionStore,
    images: ImageStore,
    timeout: Duration,
    session: Option<String>,
}

impl HumanOracle {
    pub fn new(id: impl Into<String>, store: SessionStore, images: ImageStore, timeout: Duration) -> Self {
        HumanOracle {
            id: id.into(),
            store,
            images,
            timeout,
            session: None,
        }
    }
}

impl Oracle for HumanOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn begin_episode(&mut self, start: &EpisodeStart<'_>) -> Result<(), AgentError> {
        let png = self
            .images
            .load(start.target_image)
            .and_then(|img| img.to_png())
            .map_err(|e| AgentError::ImageUnavailable(e.to_string()))?;
        self.session = Some(self.store.open(
            &self.id,
            start.episode_id,
            start.description,
            start.target_image,
            png,
        ));
        Ok(())
    }

    fn answer(&mut self, req: &OracleRequest<'_>) -> Result<Timed<String>, AgentError> {
        let id = self
            .session
            .as_deref()
            .ok_or_else(|| AgentError::Other("no open human session".into()))?;
        let start = Instant::now();
        let answer = self.store.ask(id, req.question, self.timeout).map_err(|e| match e {
            BridgeError::Timeout => AgentError::Timeout("oracle timeout".into()),
            other => AgentError::Other(other.to_string()),
        })?;
        Ok(Timed {
            value: answer,
            latency: seconds(start.elapsed().as_micros() as u64),
            replayed: false,
        })
    }

    fn end_episode(&mut self, _episode_id: &str) {
        if let Some(id) = self.session.take() {
            self.store.close(&id);
        }
    }
}
