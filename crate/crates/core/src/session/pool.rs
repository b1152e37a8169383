use std::collections::BTreeMap;
use std::sync::Arc;

use crate::episode::EpisodeLog;
use crate::par::{self, Execution};
use crate::registry::{Registry, RegistryError};

use super::{Owner, Session, SessionParams, StepReport};

pub const DEFAULT_MAX_SESSIONS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("scene not found: `{0}`")]
    UnknownScene(String),
    #[error("session capacity reached ({0})")]
    Capacity(usize),
    #[error("no session {0}")]
    UnknownSession(u32),
    #[error("snapshot does not match the scene")]
    SnapshotMismatch,
}

/// All live sessions of a server.
#[derive(Debug)]
pub struct SessionPool {
    registry: Arc<Registry>,
    params: SessionParams,
    max_sessions: usize,
    sessions: BTreeMap<u32, Session>,
    next_id: u32,
}

impl SessionPool {
    pub fn new(registry: Arc<Registry>, params: SessionParams, max_sessions: usize) -> Self {
        Self {
            registry,
            params,
            max_sessions,
            sessions: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    fn resolve(&self, scene_id: &str) -> Result<crate::registry::ResolvedScene, SessionError> {
        match self.registry.scene(scene_id) {
            Ok(s) => Ok(s.clone()),
            Err(RegistryError::UnknownScene(id)) => Err(SessionError::UnknownScene(id)),
            Err(_) => Err(SessionError::UnknownScene(scene_id.to_string())),
        }
    }

    pub fn create(&mut self, scene_id: &str, seed: u64, owner: Owner) -> Result<u32, SessionError> {
        let scene = self.resolve(scene_id)?;
        if self.sessions.len() >= self.max_sessions {
            return Err(SessionError::Capacity(self.max_sessions));
        }
        let id = self.next_id;
        // session id 0 is reserved for unbound handshakes
        self.next_id = self.next_id.checked_add(1).unwrap_or(1);
        self.sessions.insert(id, Session::new(id, scene, self.params, seed, owner));
        Ok(id)
    }

    pub fn get(&self, id: u32) -> Result<&Session, SessionError> {
        self.sessions.get(&id).ok_or(SessionError::UnknownSession(id))
    }

    pub fn get_mut(&mut self, id: u32) -> Result<&mut Session, SessionError> {
        self.sessions.get_mut(&id).ok_or(SessionError::UnknownSession(id))
    }

    /// Switches a session's scene. On an unknown scene the session is untouched.
    pub fn switch_task(&mut self, id: u32, scene_id: &str, seed: u64) -> Result<Option<EpisodeLog>, SessionError> {
        let scene = self.resolve(scene_id)?;
        Ok(self.get_mut(id)?.switch_task(scene, seed))
    }

    /// Removes a session, returning its final episode if it had records.
    pub fn close(&mut self, id: u32) -> Result<Option<EpisodeLog>, SessionError> {
        let s = self.sessions.remove(&id).ok_or(SessionError::UnknownSession(id))?;
        Ok(s.close())
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.sessions.keys().copied().collect()
    }

    /// Steps every session once. Sessions share nothing, so they run in
    /// parallel under [`Execution::Parallel`].
    pub fn step_all(&mut self, mode: Execution) -> Vec<(u32, StepReport)> {
        let mut live: Vec<&mut Session> = self.sessions.values_mut().collect();
        par::map_mut(mode, &mut live, |s| (s.id(), s.step()))
    }

    /// Steps only the sessions whose id passes `keep`; the rest stay paused.
    pub fn step_where(&mut self, mode: Execution, keep: impl Fn(u32) -> bool) -> Vec<(u32, StepReport)> {
        let mut live: Vec<&mut Session> = self.sessions.values_mut().filter(|s| keep(s.id())).collect();
        par::map_mut(mode, &mut live, |s| (s.id(), s.step()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(max: usize) -> SessionPool {
        SessionPool::new(Arc::new(Registry::bundled()), SessionParams::default(), max)
    }

    #[test]
    fn capacity_enforced() {
        let mut p = pool(DEFAULT_MAX_SESSIONS);
        for _ in 0..64 {
            p.create("planar_reach", 1, Owner::default()).unwrap();
        }
        assert_eq!(p.create("planar_reach", 1, Owner::default()), Err(SessionError::Capacity(64)));
        assert_eq!(p.len(), 64);
        assert_eq!(p.step_all(Execution::Parallel).len(), 64);
        let stepped = p.step_where(Execution::Sequential, |id| id % 2 == 0);
        assert_eq!(stepped.len(), 32);
        assert_eq!(p.get(1).unwrap().state().tick, 1);
        assert_eq!(p.get(2).unwrap().state().tick, 2);
    }

    #[test]
    fn unknown_scene() {
        let mut p = pool(4);
        assert_eq!(
            p.create("nope", 0, Owner::default()),
            Err(SessionError::UnknownScene("nope".into()))
        );
        let id = p.create("sort_bolts", 1, Owner::default()).unwrap();
        assert!(p.switch_task(id, "nope", 0).is_err());
        assert_eq!(p.get(id).unwrap().scene().scene.id, "sort_bolts");
    }

    #[test]
    fn modes_step_identically() {
        let mut a = pool(8);
        let mut b = pool(8);
        for p in [&mut a, &mut b] {
            for seed in 1..=4 {
                p.create("sort_bolts", seed, Owner::default()).unwrap();
            }
        }
        for _ in 0..10 {
            a.step_all(Execution::Parallel);
            b.step_all(Execution::Sequential);
        }
        for id in a.ids() {
            assert_eq!(a.get(id).unwrap().state(), b.get(id).unwrap().state());
        }
    }
}
