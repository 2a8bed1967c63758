use std::fmt;

use ros_transfer::sim::Nanos;

use crate::script::Assertion;

/// One trace line: who decided or changed what, and when.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub at: Nanos,
    pub who: String,
    pub text: String,
}

impl Line {
    /// The line without its time column, which patterns match against.
    pub fn body(&self) -> String {
        format!("{} {}", self.who, self.text)
    }
}

impl fmt::Display for Line {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", fmt_time(self.at), self.who, self.text)
    }
}

/// Seconds with microsecond precision, computed without floats.
pub fn fmt_time(t: Nanos) -> String {
    format!("{}.{:06}", t / 1_000_000_000, (t % 1_000_000_000) / 1_000)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub lines: Vec<Line>,
}

impl Trace {
    pub fn push(&mut self, at: Nanos, who: impl Into<String>, text: impl Into<String>) {
        self.lines.push(Line {
            at,
            who: who.into(),
            text: text.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn bodies(&self) -> impl Iterator<Item = String> + '_ {
        self.lines.iter().map(Line::body)
    }

    pub fn contains(&self, pattern: &str) -> bool {
        self.bodies().any(|b| b.contains(pattern))
    }

    pub fn count(&self, pattern: &str) -> usize {
        self.bodies().filter(|b| b.contains(pattern)).count()
    }

    pub fn position(&self, pattern: &str) -> Option<usize> {
        self.bodies().position(|b| b.contains(pattern))
    }

    /// Lines whose body contains `pattern`.
    pub fn matching<'a>(&'a self, pattern: &'a str) -> impl Iterator<Item = &'a Line> + 'a {
        self.lines.iter().filter(move |l| l.body().contains(pattern))
    }

    /// Checks one assertion; the error says what was violated.
    pub fn check(&self, a: &Assertion) -> Result<(), String> {
        match a {
            Assertion::Contains { pattern } => {
                self.contains(pattern).then_some(()).ok_or_else(|| format!("no line contains {pattern:?}"))
            }
            Assertion::Absent { pattern } => match self.matching(pattern).next() {
                None => Ok(()),
                Some(l) => Err(format!("unexpected line {l}")),
            },
            Assertion::Count { pattern, n } => {
                let got = self.count(pattern);
                (got == *n)
                    .then_some(())
                    .ok_or_else(|| format!("{got} lines contain {pattern:?}, expected {n}"))
            }
            Assertion::Before { first, then } => match (self.position(first), self.position(then)) {
                (Some(a), Some(b)) if a < b => Ok(()),
                (Some(_), Some(_)) => Err(format!("{then:?} happened before {first:?}")),
                (None, _) => Err(format!("{first:?} never happened")),
                (_, None) => Err(format!("{then:?} never happened")),
            },
            Assertion::NotAfter { marker, pattern } => {
                let Some(m) = self.position(marker) else { return Ok(()) };
                match self.lines[m..].iter().find(|l| l.body().contains(pattern.as_str())) {
                    None => Ok(()),
                    Some(l) => Err(format!("{l} follows {marker:?}")),
                }
            }
            Assertion::Resolved { replica, version } => {
                let assigned = format!("assign {replica}/");
                let want = format!(" v={version} ");
                let mut n = 0;
                for l in self.lines.iter().filter(|l| l.text.starts_with(&assigned)) {
                    n += 1;
                    if !l.text.contains(&want) {
                        return Err(format!("diverged: {l}"));
                    }
                }
                if n == 0 {
                    return Err(format!("{replica} was never assigned a source"));
                }
                let fin = format!("final {replica}/");
                let state = format!("published({version})");
                let mut shards = 0;
                for l in self.lines.iter().filter(|l| l.text.starts_with(&fin)) {
                    shards += 1;
                    if !l.text.ends_with(&state) {
                        return Err(format!("diverged: {l}"));
                    }
                }
                (shards > 0).then_some(()).ok_or_else(|| format!("{replica} has no shard actors"))
            }
            Assertion::Final { actor, state } => {
                let l = self
                    .lines
                    .iter()
                    .rev()
                    .find(|l| l.who == *actor && l.text.starts_with("final "))
                    .ok_or_else(|| format!("no final state for {actor}"))?;
                l.text
                    .ends_with(&format!(" {state}"))
                    .then_some(())
                    .ok_or_else(|| format!("{actor} ended as {:?}, expected {state}", l.text))
            }
        }
    }

    /// Every violated assertion, in order.
    pub fn violations(&self, asserts: &[Assertion]) -> Vec<String> {
        asserts.iter().filter_map(|a| self.check(a).err()).collect()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn times_render_exactly() {
        assert_eq!(fmt_time(0), "0.000000");
        assert_eq!(fmt_time(1_500_000_123), "1.500000");
        assert_eq!(fmt_time(12_000_001_000), "12.000001");
    }

    #[test]
    fn ordering_and_counts() {
        let mut t = Trace::default();
        t.push(0, "server", "published a v=1");
        t.push(1, "b", "final b/0 published(1)");
        t.push(2, "server", "released a v=1");
        let before = Assertion::Before {
            first: "published a".into(),
            then: "released a".into(),
        };
        assert!(t.check(&before).is_ok());
        let after = Assertion::Before {
            first: "released a".into(),
            then: "published a".into(),
        };
        assert!(t.check(&after).is_err());
        assert!(t.check(&Assertion::Count { pattern: "a v=1".into(), n: 2 }).is_ok());
        let fin = Assertion::Final {
            actor: "b".into(),
            state: "published(1)".into(),
        };
        assert!(t.check(&fin).is_ok());
    }
}
