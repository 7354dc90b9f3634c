//! Bulk survey of server timestamp accuracy.

use crate::probe::{extract_server_timestamp, ProbeFailure, ProbeOutcome, Prober};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Duration;

/// Skew buckets in whole seconds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Hash, Serialize, Deserialize)]
pub enum Bucket {
    #[serde(rename = "0-1")]
    UpTo1,
    #[serde(rename = "2-5")]
    UpTo5,
    #[serde(rename = "6-60")]
    UpTo60,
    #[serde(rename = "61-300")]
    UpTo300,
    #[serde(rename = ">300")]
    Beyond300,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [
        Bucket::UpTo1,
        Bucket::UpTo5,
        Bucket::UpTo60,
        Bucket::UpTo300,
        Bucket::Beyond300,
    ];

    pub fn of(delta_secs: u64) -> Bucket {
        match delta_secs {
            0..=1 => Bucket::UpTo1,
            2..=5 => Bucket::UpTo5,
            6..=60 => Bucket::UpTo60,
            61..=300 => Bucket::UpTo300,
            _ => Bucket::Beyond300,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Bucket::UpTo1 => "0-1",
            Bucket::UpTo5 => "2-5",
            Bucket::UpTo60 => "6-60",
            Bucket::UpTo300 => "61-300",
            Bucket::Beyond300 => ">300",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug)]
pub struct ScanConfig {
    pub concurrency: usize,
    pub timeout: Duration,
    /// Retry unreachable bare domains as `www.<domain>`.
    pub www_fallback: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            concurrency: 64,
            timeout: Duration::from_secs(10),
            www_fallback: false,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ScanEntry {
    pub domain: String,
    /// The name actually probed; differs from `domain` after a `www.` fallback.
    pub target: String,
    pub reachable: bool,
    pub dhe: bool,
    pub server_time: Option<u32>,
    pub local_time: u64,
    pub delta_secs: Option<u64>,
    pub bucket: Option<Bucket>,
    pub error: Option<String>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct BucketCount {
    pub bucket: Bucket,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ScanReport {
    pub domains: usize,
    pub reachable: usize,
    pub dhe: usize,
    pub buckets: Vec<BucketCount>,
    pub entries: Vec<ScanEntry>,
}

impl ScanReport {
    pub fn from_entries(entries: Vec<ScanEntry>) -> ScanReport {
        let measured = entries.iter().filter(|e| e.bucket.is_some()).count();
        let buckets = Bucket::ALL
            .iter()
            .map(|&bucket| {
                let count = entries.iter().filter(|e| e.bucket == Some(bucket)).count();
                let percent = if measured == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / measured as f64
                };
                BucketCount { bucket, count, percent }
            })
            .collect();
        ScanReport {
            domains: entries.len(),
            reachable: entries.iter().filter(|e| e.reachable).count(),
            dhe: entries.iter().filter(|e| e.dhe).count(),
            buckets,
            entries,
        }
    }

    pub fn count(&self, bucket: Bucket) -> usize {
        self.buckets.iter().find(|b| b.bucket == bucket).map_or(0, |b| b.count)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "domains {}  reachable {}  dhe {}\n",
            self.domains, self.reachable, self.dhe
        ));
        out.push_str(&format!("{:<8} {:>8} {:>8}\n", "skew(s)", "count", "percent"));
        for b in &self.buckets {
            out.push_str(&format!("{:<8} {:>8} {:>7.2}%\n", b.bucket.label(), b.count, b.percent));
        }
        out
    }
}

/// Reads one domain per line, skipping blanks and `#` comments.
pub fn parse_domain_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

async fn scan_one<P: Prober>(prober: &P, domain: &str, config: &ScanConfig) -> ScanEntry {
    let mut target = domain.to_string();
    let mut report = prober.probe(&target, rand::random(), config.timeout).await;
    if config.www_fallback
        && report.result.outcome == ProbeOutcome::ConnectFailure
        && !domain.starts_with("www.")
    {
        let alt = format!("www.{domain}");
        let retry = prober.probe(&alt, rand::random(), config.timeout).await;
        if retry.result.outcome != ProbeOutcome::ConnectFailure {
            target = alt;
            report = retry;
        }
    }
    let signed = report.result.outcome == ProbeOutcome::Signed;
    let local_time = report.finished_ms / 1000;
    let server_time = signed.then(|| extract_server_timestamp(&report.result));
    let delta_secs = server_time.map(|s| (s as u64).abs_diff(local_time));
    ScanEntry {
        domain: domain.to_string(),
        target,
        reachable: !matches!(report.failure, Some(ProbeFailure::Connect(_))),
        dhe: signed,
        server_time,
        local_time,
        delta_secs,
        bucket: delta_secs.map(Bucket::of),
        error: report.failure.map(|f| f.to_string()),
    }
}

/// Probes every domain with at most `concurrency` probes in flight.
/// Failures are recorded per entry; entries keep input order.
pub async fn scan<P: Prober>(prober: &P, domains: &[String], config: &ScanConfig) -> ScanReport {
    let mut entries: Vec<(usize, ScanEntry)> = stream::iter(domains.iter().enumerate())
        .map(|(i, d)| async move { (i, scan_one(prober, d, config).await) })
        .buffer_unordered(config.concurrency.max(1))
        .collect()
        .await;
    entries.sort_by_key(|(i, _)| *i);
    ScanReport::from_entries(entries.into_iter().map(|(_, e)| e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_edges() {
        let cases = [
            (0, "0-1"),
            (1, "0-1"),
            (2, "2-5"),
            (5, "2-5"),
            (6, "6-60"),
            (60, "6-60"),
            (61, "61-300"),
            (300, "61-300"),
            (301, ">300"),
        ];
        for (d, label) in cases {
            assert_eq!(Bucket::of(d).label(), label, "delta {d}");
        }
    }

    #[test]
    fn domain_list_skips_comments() {
        assert_eq!(parse_domain_list("a.com\n\n# x\n  b.org \n"), vec!["a.com", "b.org"]);
    }

    #[test]
    fn empty_report() {
        let r = ScanReport::from_entries(vec![]);
        assert_eq!(r.domains, 0);
        assert!(r.buckets.iter().all(|b| b.count == 0 && b.percent == 0.0));
    }
}
