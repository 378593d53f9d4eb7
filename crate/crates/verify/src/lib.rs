//! Bookkeeping for the acceptance suite: one verdict line per criterion.

use jdlan::lan::Check;

/// One named condition inside a criterion.
#[derive(Debug, Clone)]
pub struct Item {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Item {
    pub fn new(name: &str, passed: bool, detail: String) -> Item {
        Item { name: name.into(), passed, detail }
    }

    pub fn from_check(c: &Check) -> Item {
        Item::new(&c.name, c.passed, format!("{:.6} ({})", c.observed, c.bound))
    }
}

#[derive(Debug, Default)]
pub struct Tally {
    verdicts: Vec<(usize, bool)>,
}

impl Tally {
    /// Prints the verdict line for criterion `k` followed by its items.
    pub fn record(&mut self, k: usize, title: &str, items: &[Item]) -> bool {
        let passed = !items.is_empty() && items.iter().all(|i| i.passed);
        println!("{} criterion {k}: {title}", if passed { "PASS" } else { "FAIL" });
        for i in items {
            println!("    [{}] {}: {}", if i.passed { "ok" } else { "x" }, i.name, i.detail);
        }
        self.verdicts.push((k, passed));
        passed
    }

    /// Records a criterion whose computation itself errored.
    pub fn error(&mut self, k: usize, title: &str, err: &dyn std::fmt::Display) -> bool {
        self.record(k, title, &[Item::new("run", false, err.to_string())])
    }

    pub fn failed(&self) -> Vec<usize> {
        self.verdicts.iter().filter(|v| !v.1).map(|v| v.0).collect()
    }

    pub fn summary(&self) -> String {
        let ok = self.verdicts.iter().filter(|v| v.1).count();
        format!("{ok}/{} criteria passed", self.verdicts.len())
    }
}
