//! Static model of the simulated Nao: 22 hinge joints, their perceptor and
//! effector names, angle limits and speed caps.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

pub const NUM_JOINTS: usize = 22;

/// Speed cap applied to every joint unless overridden in configuration.
pub const DEFAULT_MAX_SPEED: f64 = 350.0;

const JOINT_TABLE: &str = include_str!("../data/nao_joints.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JointGroup {
    Head,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl JointGroup {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "head" => JointGroup::Head,
            "left_arm" => JointGroup::LeftArm,
            "right_arm" => JointGroup::RightArm,
            "left_leg" => JointGroup::LeftLeg,
            "right_leg" => JointGroup::RightLeg,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub index: usize,
    pub perceptor_name: &'static str,
    pub effector_name: &'static str,
    /// Degrees.
    pub min_angle: f64,
    pub max_angle: f64,
    /// Degrees per second.
    pub max_speed: f64,
    pub group: JointGroup,
}

impl JointSpec {
    pub fn clamp_angle(&self, deg: f64) -> f64 {
        deg.clamp(self.min_angle, self.max_angle)
    }
}

fn parse_table(text: &'static str) -> Vec<JointSpec> {
    let mut out = Vec::with_capacity(NUM_JOINTS);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&'static str> = line.split_whitespace().collect();
        assert!(
            cols.len() == 7,
            "nao_joints.txt:{}: expected 7 columns",
            lineno + 1
        );
        let num = |s: &str| -> f64 {
            s.parse()
                .unwrap_or_else(|_| panic!("nao_joints.txt:{}: bad number {s:?}", lineno + 1))
        };
        out.push(JointSpec {
            index: num(cols[0]) as usize,
            perceptor_name: cols[1],
            effector_name: cols[2],
            group: JointGroup::from_name(cols[3])
                .unwrap_or_else(|| panic!("nao_joints.txt:{}: bad group", lineno + 1)),
            min_angle: num(cols[4]),
            max_angle: num(cols[5]),
            max_speed: num(cols[6]),
        });
    }
    out
}

/// The 22-joint table, indexed by joint index.
pub fn registry() -> &'static [JointSpec] {
    static REGISTRY: OnceLock<Vec<JointSpec>> = OnceLock::new();
    REGISTRY.get_or_init(|| parse_table(JOINT_TABLE))
}

pub fn by_perceptor(name: &str) -> Option<&'static JointSpec> {
    registry().iter().find(|j| j.perceptor_name == name)
}

pub fn by_effector(name: &str) -> Option<&'static JointSpec> {
    registry().iter().find(|j| j.effector_name == name)
}

/// Looks a joint up by either its perceptor or effector name.
pub fn by_name(name: &str) -> Option<&'static JointSpec> {
    by_perceptor(name).or_else(|| by_effector(name))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JointSetError {
    #[error("joint index {0} out of range")]
    OutOfRange(usize),
    #[error("joint {0} listed twice")]
    Duplicate(usize),
    #[error("unknown joint name {0:?}")]
    UnknownName(String),
}

/// Ordered subset of joint indices. Ascending order fixes the layout of
/// observation and action vectors.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct JointSet(Vec<usize>);

impl JointSet {
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self, JointSetError> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        if let Some(&bad) = v.iter().find(|&&i| i >= NUM_JOINTS) {
            return Err(JointSetError::OutOfRange(bad));
        }
        v.sort_unstable();
        if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
            return Err(JointSetError::Duplicate(w[0]));
        }
        Ok(JointSet(v))
    }

    /// Parses a comma-separated list of joint names, or one of the presets
    /// `all`, `default`, `leg4`.
    pub fn parse(text: &str) -> Result<Self, JointSetError> {
        match text.trim() {
            "all" => return Ok(JointSet::all()),
            "default" => return Ok(default_controllable()),
            "leg4" => return Ok(JointSet::leg4()),
            _ => {}
        }
        let mut idx = Vec::new();
        for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let spec = by_name(name).ok_or_else(|| JointSetError::UnknownName(name.into()))?;
            idx.push(spec.index);
        }
        JointSet::new(idx)
    }

    pub fn all() -> Self {
        JointSet((0..NUM_JOINTS).collect())
    }

    /// Reduced kicking set: right hip roll, hip pitch, knee and ankle pitch.
    pub fn leg4() -> Self {
        JointSet::parse("rlj2,rlj3,rlj4,rlj5").expect("static joint names")
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn specs(&self) -> impl Iterator<Item = &'static JointSpec> + '_ {
        self.0.iter().map(|&i| &registry()[i])
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.specs().map(|s| s.perceptor_name).collect()
    }
}

impl fmt::Debug for JointSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl fmt::Display for JointSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

/// Every joint except the head: 20 joints.
pub fn default_controllable() -> JointSet {
    JointSet(
        registry()
            .iter()
            .filter(|j| j.group != JointGroup::Head)
            .map(|j| j.index)
            .collect(),
    )
}

/// Per-joint speed caps, starting from the registry and optionally overridden.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedLimits([f64; NUM_JOINTS]);

impl Default for SpeedLimits {
    fn default() -> Self {
        let mut caps = [0.0; NUM_JOINTS];
        for spec in registry() {
            caps[spec.index] = spec.max_speed;
        }
        SpeedLimits(caps)
    }
}

impl SpeedLimits {
    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn set(&mut self, index: usize, deg_per_s: f64) {
        self.0[index] = deg_per_s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_has_22_joints_in_index_order() {
        let r = registry();
        assert_eq!(r.len(), 22);
        for (i, j) in r.iter().enumerate() {
            assert_eq!(j.index, i);
            assert!(j.min_angle < j.max_angle, "{}", j.perceptor_name);
            assert!(j.max_speed > 0.0);
        }
    }

    #[test]
    fn names_are_unique() {
        let p: HashSet<_> = registry().iter().map(|j| j.perceptor_name).collect();
        let e: HashSet<_> = registry().iter().map(|j| j.effector_name).collect();
        assert_eq!(p.len(), 22);
        assert_eq!(e.len(), 22);
    }

    #[test]
    fn perceptor_to_effector_lookup() {
        assert_eq!(by_perceptor("laj1").unwrap().effector_name, "lae1");
        assert_eq!(by_effector("rle6").unwrap().perceptor_name, "rlj6");
    }

    #[test]
    fn groups_partition_joints() {
        let count = |g| registry().iter().filter(|j| j.group == g).count();
        assert_eq!(count(JointGroup::Head), 2);
        assert_eq!(count(JointGroup::LeftArm), 4);
        assert_eq!(count(JointGroup::RightArm), 4);
        assert_eq!(count(JointGroup::LeftLeg), 6);
        assert_eq!(count(JointGroup::RightLeg), 6);
    }

    #[test]
    fn default_controllable_excludes_head() {
        let set = default_controllable();
        assert_eq!(set.len(), 20);
        assert!(set.specs().all(|s| s.group != JointGroup::Head));
        assert!(set.indices().windows(2).all(|w| w[0] < w[1]));
        assert!(set.indices().iter().all(|&i| i < NUM_JOINTS));
    }

    #[test]
    fn registry_is_stable() {
        assert!(std::ptr::eq(registry(), registry()));
        assert_eq!(registry().to_vec(), parse_table(JOINT_TABLE));
    }

    #[test]
    fn joint_set_validation() {
        assert_eq!(JointSet::new([3, 1]).unwrap().indices(), &[1, 3]);
        assert_eq!(JointSet::new([1, 1]), Err(JointSetError::Duplicate(1)));
        assert_eq!(JointSet::new([22]), Err(JointSetError::OutOfRange(22)));
        assert_eq!(
            JointSet::leg4().names(),
            vec!["rlj2", "rlj3", "rlj4", "rlj5"]
        );
        assert!(matches!(
            JointSet::parse("laj1,nope"),
            Err(JointSetError::UnknownName(_))
        ));
        assert_eq!(
            JointSet::parse("lle1, llj1"),
            Err(JointSetError::Duplicate(10))
        );
    }
}
