use std::fmt::Write as _;

pub const HEADER: &str = "step,mean_return,eval_return_greedy,arch_entropy,norm_entropy,alpha,p_max,mass_deleted,depth_argmax,policy_loss,value_loss,approx_kl";

/// One evaluation row. `mean_return` is the sampled relaxed policy and
/// `eval_return_greedy` the program extracted at that step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_return: f64,
    pub eval_return_greedy: f64,
    pub arch_entropy: f64,
    pub norm_entropy: f64,
    pub alpha: f64,
    pub p_max: f64,
    pub mass_deleted: f64,
    pub depth_argmax: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_return,
            self.eval_return_greedy,
            self.arch_entropy,
            self.norm_entropy,
            self.alpha,
            self.p_max,
            self.mass_deleted,
            self.depth_argmax,
            self.policy_loss,
            self.value_loss,
            self.approx_kl
        )
        .expect("writing to a string");
        s
    }

    pub fn parse(line: &str) -> Option<MetricsRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 12 {
            return None;
        }
        let x = |i: usize| f[i].parse::<f64>().ok();
        Some(MetricsRow {
            step: f[0].parse().ok()?,
            mean_return: x(1)?,
            eval_return_greedy: x(2)?,
            arch_entropy: x(3)?,
            norm_entropy: x(4)?,
            alpha: x(5)?,
            p_max: x(6)?,
            mass_deleted: x(7)?,
            depth_argmax: f[8].parse().ok()?,
            policy_loss: x(9)?,
            value_loss: x(10)?,
            approx_kl: x(11)?,
        })
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Parses a metrics file, checking the header.
pub fn parse_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()?.trim() != HEADER {
        return None;
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}
