//! Per-step metrics rows.

pub const METRICS_HEADER: &str = "epoch,step,loss_total,loss_lp,loss_adv,lambda_adv,gp_value,critic_objective,ghost_residual_train,wall_time_s";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_lp: f64,
    pub loss_adv: f64,
    pub lambda_adv: f64,
    pub gp_value: f64,
    pub critic_objective: f64,
    pub ghost_residual_train: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    /// Shortest round-trip formatting, so equal values give equal text.
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss_total,
            self.loss_lp,
            self.loss_adv,
            self.lambda_adv,
            self.gp_value,
            self.critic_objective,
            self.ghost_residual_train,
            self.wall_time_s
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let r = |i: usize| f[i].parse::<f64>().ok();
        Some(MetricsRow {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            loss_total: r(2)?,
            loss_lp: r(3)?,
            loss_adv: r(4)?,
            lambda_adv: r(5)?,
            gp_value: r(6)?,
            critic_objective: r(7)?,
            ghost_residual_train: r(8)?,
            wall_time_s: r(9)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let row = MetricsRow {
            epoch: 3,
            step: 77,
            loss_total: 0.1 + 0.2,
            loss_lp: 1e-300,
            loss_adv: -2.5,
            lambda_adv: 1.0 / 3.0,
            gp_value: 0.0,
            critic_objective: 7.0,
            ghost_residual_train: 0.125,
            wall_time_s: 0.0,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv_line()), Some(row));
        assert_eq!(METRICS_HEADER.split(',').count(), 10);
    }
}
