use aerokit::metrics::{AxisScores, MetricsReport};
use aerokit::AXIS_NAMES;
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

const KEYS: [&str; 8] = [
    "method",
    "tool_version",
    "seed",
    "config_fingerprint",
    "clip_ids",
    "aas",
    "pcr",
    "flow_imu_r",
];

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str) -> Result<T, String> {
    let v = obj.get(key).ok_or_else(|| format!("missing key `{key}`"))?;
    serde_json::from_value(v.clone()).map_err(|e| format!("key `{key}`: {e}"))
}

/// Parse a report, naming the offending key on any schema problem.
pub fn parse_report(text: &str) -> Result<MetricsReport, String> {
    let value: Value = serde_json::from_str(text).map_err(|e| format!("not valid JSON: {e}"))?;
    let obj = value.as_object().ok_or("top level is not an object")?;
    if let Some(extra) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(format!("unknown key `{extra}`"));
    }
    let flow_imu_r = match obj.get("flow_imu_r") {
        None | Some(Value::Null) => None,
        Some(_) => Some(field::<AxisScores>(obj, "flow_imu_r")?),
    };
    let report = MetricsReport {
        method: field(obj, "method")?,
        tool_version: field(obj, "tool_version")?,
        seed: field(obj, "seed")?,
        config_fingerprint: field(obj, "config_fingerprint")?,
        clip_ids: field(obj, "clip_ids")?,
        aas: field(obj, "aas")?,
        pcr: field(obj, "pcr")?,
        flow_imu_r,
    };
    report.validate()?;
    Ok(report)
}

/// One metric/axis row across methods.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub metric: &'static str,
    pub axis: &'static str,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub methods: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    /// Per-axis rows for every metric; reports must cover the same clips.
    pub fn build(reports: &[MetricsReport]) -> Result<Self, String> {
        let first = reports.first().ok_or("no reports given")?;
        for r in &reports[1..] {
            if r.clip_ids != first.clip_ids {
                return Err(format!(
                    "`clip_ids` differ between `{}` and `{}`; reports are not comparable",
                    first.method, r.method
                ));
            }
        }
        let mut rows = Vec::new();
        let metrics: [(&'static str, fn(&MetricsReport) -> Option<AxisScores>); 3] = [
            ("aas", |r| Some(r.aas)),
            ("pcr", |r| Some(r.pcr)),
            ("flow_imu_r", |r| r.flow_imu_r),
        ];
        for (metric, get) in metrics {
            if reports.iter().all(|r| get(r).is_none()) {
                continue;
            }
            for (j, axis) in AXIS_NAMES.iter().enumerate() {
                rows.push(Row {
                    metric,
                    axis,
                    values: reports.iter().map(|r| get(r).map(|s| s.per_axis[j])).collect(),
                });
            }
            rows.push(Row {
                metric,
                axis: "mean",
                values: reports.iter().map(|r| get(r).map(|s| s.mean)).collect(),
            });
        }
        Ok(Self {
            methods: reports.iter().map(|r| r.method.clone()).collect(),
            rows,
        })
    }

    /// Last minus first, present only when comparing exactly two methods.
    fn delta(&self, row: &Row) -> Option<Option<f64>> {
        if self.methods.len() != 2 {
            return None;
        }
        Some(match (row.values[0], row.values[1]) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        })
    }

    pub fn render_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut header = vec!["metric".to_string(), "axis".to_string()];
        header.extend(self.methods.iter().cloned());
        if self.methods.len() == 2 {
            header.push("delta".into());
        }
        let mut lines = vec![header];
        for row in &self.rows {
            let mut cells = vec![row.metric.to_string(), row.axis.to_string()];
            cells.extend(row.values.iter().map(|v| fmt(*v)));
            if let Some(d) = self.delta(row) {
                cells.push(d.map_or("-".into(), |x| format!("{x:+.4}")));
            }
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("metric,axis");
        for m in &self.methods {
            out.push(',');
            out.push_str(&m.replace([',', '\n'], "_"));
        }
        if self.methods.len() == 2 {
            out.push_str(",delta");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.metric, row.axis));
            for v in &row.values {
                out.push(',');
                if let Some(x) = v {
                    out.push_str(&x.to_string());
                }
            }
            if let Some(d) = self.delta(row) {
                out.push(',');
                if let Some(x) = d {
                    out.push_str(&x.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}
