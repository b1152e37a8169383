//! Named robots and scenes available to sessions.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::fixtures;
use crate::model::{parse_robot, ModelError, RobotModel};
use crate::scene::{parse_scene, SceneSpec};

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("scene not found: `{0}`")]
    UnknownScene(String),
    #[error("scene `{scene}` references unknown robot `{robot}`")]
    UnknownRobot { scene: String, robot: String },
    #[error("scene `{scene}`: {message}")]
    InvalidScene { scene: String, message: String },
    #[error("{path}: {source}")]
    Parse { path: String, source: ModelError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A robot model together with the text it was parsed from.
#[derive(Debug, Clone)]
pub struct RobotEntry {
    pub model: Arc<RobotModel>,
    pub text: Arc<str>,
}

/// A scene with its robot placed at the declared base and a validated home
/// configuration.
#[derive(Debug, Clone)]
pub struct ResolvedScene {
    pub scene: Arc<SceneSpec>,
    pub model: Arc<RobotModel>,
    pub home: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    robots: BTreeMap<String, RobotEntry>,
    scenes: BTreeMap<String, ResolvedScene>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The robots and scenes shipped with the crate.
    pub fn bundled() -> Self {
        let mut r = Self::new();
        for text in fixtures::ROBOTS {
            r.add_robot(text).expect("bundled robot parses");
        }
        for text in fixtures::SCENES {
            r.add_scene(text).expect("bundled scene resolves");
        }
        r
    }

    /// Registers (or replaces) a robot, returning its name.
    pub fn add_robot(&mut self, text: &str) -> Result<String, ModelError> {
        let model = parse_robot(text)?;
        let name = model.name.clone();
        self.robots.insert(
            name.clone(),
            RobotEntry {
                model: Arc::new(model),
                text: text.into(),
            },
        );
        Ok(name)
    }

    /// Registers (or replaces) a scene whose robot is already registered.
    pub fn add_scene(&mut self, text: &str) -> Result<String, RegistryError> {
        let scene = parse_scene(text)?;
        let resolved = self.resolve(scene)?;
        let id = resolved.scene.id.clone();
        self.scenes.insert(id.clone(), resolved);
        Ok(id)
    }

    fn resolve(&self, scene: SceneSpec) -> Result<ResolvedScene, RegistryError> {
        let invalid = |message: String| RegistryError::InvalidScene {
            scene: scene.id.clone(),
            message,
        };
        let [robot_ref] = scene.robots.as_slice() else {
            return Err(invalid(format!(
                "exactly one robot per scene is supported, found {}",
                scene.robots.len()
            )));
        };
        let entry = self.robots.get(&robot_ref.robot).ok_or_else(|| RegistryError::UnknownRobot {
            scene: scene.id.clone(),
            robot: robot_ref.robot.clone(),
        })?;
        let model = (*entry.model).clone().with_base(robot_ref.base);
        let home = match &robot_ref.home {
            None => model.mid_configuration(),
            Some(h) => {
                if h.len() != model.dof() {
                    return Err(invalid(format!("home has {} values, robot has {} dof", h.len(), model.dof())));
                }
                let (lo, hi) = (model.lower_limits(), model.upper_limits());
                if let Some(i) = (0..h.len()).find(|&i| !(lo[i] <= h[i] && h[i] <= hi[i])) {
                    return Err(invalid(format!("home value {} of joint {i} outside [{}, {}]", h[i], lo[i], hi[i])));
                }
                h.clone()
            }
        };
        Ok(ResolvedScene {
            scene: Arc::new(scene),
            model: Arc::new(model),
            home,
        })
    }

    /// Loads every `*.robot` then every `*.scene` file in `dir`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), RegistryError> {
        let io = |path: &Path, source| RegistryError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        for ext in ["robot", "scene"] {
            for path in files.iter().filter(|p| p.extension().is_some_and(|e| e == ext)) {
                let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
                let tag = |source| RegistryError::Parse {
                    path: path.display().to_string(),
                    source,
                };
                if ext == "robot" {
                    self.add_robot(&text).map_err(tag)?;
                } else {
                    match self.add_scene(&text) {
                        Err(RegistryError::Model(e)) => return Err(tag(e)),
                        other => other?,
                    };
                }
            }
        }
        Ok(())
    }

    pub fn scene(&self, id: &str) -> Result<&ResolvedScene, RegistryError> {
        self.scenes.get(id).ok_or_else(|| RegistryError::UnknownScene(id.to_string()))
    }

    pub fn robot(&self, name: &str) -> Option<&RobotEntry> {
        self.robots.get(name)
    }

    pub fn scene_ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.keys().map(String::as_str)
    }

    pub fn robot_names(&self) -> impl Iterator<Item = &str> {
        self.robots.keys().map(String::as_str)
    }
}
