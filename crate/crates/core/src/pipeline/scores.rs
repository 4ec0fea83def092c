use crate::error::{Error, Result};

/// Per-row model scores: original row id, label, one column per model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<usize>,
    pub labels: Vec<u8>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl ScoreTable {
    pub fn new(rows: Vec<usize>, labels: Vec<u8>) -> Self {
        Self {
            rows,
            labels,
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                found: scores.len(),
            });
        }
        self.columns.retain(|(n, _)| n != name);
        self.columns.push((name.to_string(), scores));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::MissingMember(name.to_string()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string(), "label".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for i in 0..self.rows.len() {
            let mut rec = vec![self.rows[i].to_string(), self.labels[i].to_string()];
            rec.extend(self.columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.len() < 2 || header[0] != "row" || header[1] != "label" {
            return Err(Error::MissingColumn("row/label".into()));
        }
        let mut t = ScoreTable::new(Vec::new(), Vec::new());
        t.columns = header[2..].iter().map(|n| (n.clone(), Vec::new())).collect();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::NonNumericCell {
                        row: i + 1,
                        column: header[j].clone(),
                    })
            };
            t.rows.push(num(0)? as usize);
            t.labels.push(num(1)? as u8);
            for j in 2..header.len() {
                let v = num(j)?;
                t.columns[j - 2].1.push(v);
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut t = ScoreTable::new(vec![3, 9], vec![0, 1]);
        t.push("a", vec![0.1 + 0.2, 1.0 / 3.0]).unwrap();
        t.push("b", vec![1e-300, 0.999_999_999_999]).unwrap();
        assert_eq!(ScoreTable::from_csv(&t.to_csv().unwrap()).unwrap(), t);
        assert!(t.get("c").is_err());
    }
}
