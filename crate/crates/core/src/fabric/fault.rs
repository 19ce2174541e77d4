use std::collections::BTreeMap;
use std::str::FromStr;

use super::device::Survivors;
use super::DeviceId;

/// One injected crash. The crash happens right after sub-operation `at`
/// (an op-log index) has executed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrashPoint {
    pub at: u64,
    /// Device to crash; `None` means the device the sub-operation touched.
    pub device: Option<DeviceId>,
    pub permanent: bool,
    pub survivors: Survivors,
}

impl CrashPoint {
    pub fn at(at: u64) -> Self {
        CrashPoint {
            at,
            device: None,
            permanent: false,
            survivors: Survivors::DurableOnly,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultPlan {
    points: BTreeMap<u64, Vec<CrashPoint>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("fault plan line {line}: {reason}")]
pub struct FaultPlanParseError {
    pub line: usize,
    pub reason: String,
}

impl FaultPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, point: CrashPoint) -> Self {
        self.add(point);
        self
    }

    pub fn add(&mut self, point: CrashPoint) {
        self.points.entry(point.at).or_default().push(point);
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.values().map(Vec::len).sum()
    }

    pub(crate) fn take(&mut self, at: u64) -> Vec<CrashPoint> {
        self.points.remove(&at).unwrap_or_default()
    }

    pub fn points(&self) -> impl Iterator<Item = &CrashPoint> {
        self.points.values().flatten()
    }
}

/// Plain-text format, one crash per line:
///
/// ```text
/// # op-index [device=N] [permanent] [survivors=all|none]
/// 12
/// 40 device=2 permanent
/// ```
impl FromStr for FaultPlan {
    type Err = FaultPlanParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut plan = FaultPlan::new();
        for (i, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| FaultPlanParseError { line: i + 1, reason };
            let mut words = line.split_whitespace();
            let at = words
                .next()
                .unwrap()
                .parse::<u64>()
                .map_err(|e| err(format!("bad op index: {e}")))?;
            let mut point = CrashPoint::at(at);
            for w in words {
                if w == "permanent" {
                    point.permanent = true;
                } else if let Some(d) = w.strip_prefix("device=") {
                    point.device = Some(d.parse().map_err(|e| err(format!("bad device: {e}")))?);
                } else if let Some(v) = w.strip_prefix("survivors=") {
                    point.survivors = match v {
                        "all" => Survivors::All,
                        "none" => Survivors::DurableOnly,
                        other => return Err(err(format!("unknown survivors '{other}'"))),
                    };
                } else {
                    return Err(err(format!("unknown token '{w}'")));
                }
            }
            plan.add(point);
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_plain_list() {
        let plan: FaultPlan = "# crashes\n3\n\n17 device=2 permanent\n20 survivors=all\n"
            .parse()
            .unwrap();
        let pts: Vec<_> = plan.points().cloned().collect();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], CrashPoint::at(3));
        assert_eq!(pts[1].device, Some(2));
        assert!(pts[1].permanent);
        assert_eq!(pts[2].survivors, Survivors::All);
    }

    #[test]
    fn rejects_garbage() {
        let e = "4\nx\n".parse::<FaultPlan>().unwrap_err();
        assert_eq!(e.line, 2);
        assert!("5 flavour=mint".parse::<FaultPlan>().is_err());
    }
}
