use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Statistics of one outer iteration; loss values are taken before the update.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub epoch: usize,
    /// Generator updates performed in this iteration.
    pub gen_steps: usize,
    pub data_energy: f64,
    pub gen_energy: f64,
    pub entropy_gen: f64,
    pub entropy_data: f64,
    /// Mean generator objective over the inner steps.
    pub gen_loss: f64,
    pub energy_loss: f64,
    pub recon_mse: f64,
    /// Transition masks drawn (rows), zero for direct generators.
    pub masks: usize,
}

/// One record per outer iteration, plus wall-clock time kept apart so the
/// main log is reproducible bit for bit.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<IterRecord>,
    pub wall_ms: Vec<f64>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: IterRecord, wall_ms: f64) {
        self.records.push(record);
        self.wall_ms.push(wall_ms);
    }

    /// Mean of a field over the records of one epoch.
    pub fn epoch_mean(&self, epoch: usize, field: impl Fn(&IterRecord) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.records.iter().filter(|r| r.epoch == epoch).map(field).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        Ok(w.into_inner().map_err(|e| e.into_error())?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "wall_ms"])?;
        for (r, ms) in self.records.iter().zip(&self.wall_ms) {
            w.write_record([r.iteration.to_string(), format!("{ms:.3}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let mut log = TrainLog::default();
        for i in 0..3 {
            log.push(
                IterRecord {
                    iteration: i,
                    gen_steps: 2,
                    ..Default::default()
                },
                1.0,
            );
        }
        let text = String::from_utf8(log.to_csv().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("iteration,epoch,gen_steps,data_energy"));
        assert_eq!(log.epoch_mean(0, |r| r.gen_steps as f64), Some(2.0));
        assert_eq!(log.epoch_mean(1, |r| r.gen_steps as f64), None);
    }
}
