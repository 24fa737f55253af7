//! Head ownership bookkeeping and the most-activated-heads (MAH) mapping of
//! incoming classes onto heads pre-trained with auxiliary data.

use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{HeadMask, Model};

/// Who a classification head currently belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "owner", content = "class", rename_all = "snake_case")]
pub enum HeadOwner {
    Unassigned,
    Task(u32),
    Aux(u32),
}

/// Ownership of every head, plus the head set of each task in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMap {
    owners: Vec<HeadOwner>,
    task_heads: Vec<Vec<usize>>,
}

impl HeadMap {
    pub fn new(num_heads: usize) -> Self {
        Self {
            owners: vec![HeadOwner::Unassigned; num_heads],
            task_heads: vec![],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.owners.len()
    }

    pub fn owners(&self) -> &[HeadOwner] {
        &self.owners
    }

    pub fn owner(&self, head: usize) -> HeadOwner {
        self.owners[head]
    }

    /// Number of tasks mapped so far.
    pub fn num_tasks(&self) -> usize {
        self.task_heads.len()
    }

    /// Heads of task `t`, in the order of that task's class list.
    pub fn task_heads(&self, t: usize) -> &[usize] {
        &self.task_heads[t]
    }

    pub fn head_of_class(&self, class: u32) -> Option<usize> {
        self.owners.iter().position(|&o| o == HeadOwner::Task(class))
    }

    /// `(head, aux class)` for every aux-owned head, by ascending head.
    pub fn aux_assignments(&self) -> Vec<(usize, u32)> {
        self.owners
            .iter()
            .enumerate()
            .filter_map(|(h, o)| match o {
                HeadOwner::Aux(a) => Some((h, *a)),
                _ => None,
            })
            .collect()
    }

    pub fn aux_heads(&self) -> Vec<usize> {
        self.aux_assignments().into_iter().map(|(h, _)| h).collect()
    }

    pub fn aux_count(&self) -> usize {
        self.owners.iter().filter(|o| matches!(o, HeadOwner::Aux(_))).count()
    }

    pub fn task_owned_count(&self) -> usize {
        self.owners.iter().filter(|o| matches!(o, HeadOwner::Task(_))).count()
    }

    /// Heads owned by any task class.
    pub fn class_il_mask(&self) -> HeadMask {
        HeadMask(self.owners.iter().map(|o| matches!(o, HeadOwner::Task(_))).collect())
    }

    /// Heads owned by task `t`'s classes.
    pub fn task_mask(&self, t: usize) -> HeadMask {
        HeadMask::from_heads(self.num_heads(), self.task_heads[t].iter().copied())
    }

    /// The first task takes heads `0..|C_1|` in class order.
    pub fn assign_first_task(&mut self, classes: &[u32]) -> Result<()> {
        if !self.task_heads.is_empty() {
            return Err(Error::State("first task already mapped".into()));
        }
        let pairs: Vec<(u32, usize)> = classes.iter().copied().zip(0..).collect();
        self.commit(&pairs)?;
        Ok(())
    }

    /// Places auxiliary placeholder classes on the free heads, ascending.
    pub fn place_aux(&mut self, aux_classes: &[u32]) -> Result<()> {
        let free: Vec<usize> = (0..self.num_heads())
            .filter(|&h| self.owners[h] == HeadOwner::Unassigned)
            .collect();
        if free.len() < aux_classes.len() {
            return Err(Error::State(format!(
                "{} auxiliary classes but only {} free heads",
                aux_classes.len(),
                free.len()
            )));
        }
        for (&a, h) in aux_classes.iter().zip(free) {
            self.owners[h] = HeadOwner::Aux(a);
        }
        Ok(())
    }

    /// Records a new task's `(class, head)` pairs and returns the auxiliary
    /// classes retired from the taken heads.
    pub fn commit(&mut self, pairs: &[(u32, usize)]) -> Result<Vec<u32>> {
        let mut seen = Vec::with_capacity(pairs.len());
        for &(c, h) in pairs {
            if h >= self.num_heads() {
                return Err(Error::State(format!("head {h} out of range")));
            }
            if let HeadOwner::Task(owner) = self.owners[h] {
                return Err(Error::State(format!("head {h} already owned by class {owner}")));
            }
            if self.head_of_class(c).is_some() {
                return Err(Error::State(format!("class {c} already has a head")));
            }
            if seen.contains(&h) {
                return Err(Error::State(format!("head {h} assigned twice")));
            }
            seen.push(h);
        }
        let mut retired = Vec::new();
        for &(c, h) in pairs {
            if let HeadOwner::Aux(a) = self.owners[h] {
                retired.push(a);
            }
            self.owners[h] = HeadOwner::Task(c);
        }
        self.task_heads.push(seen);
        Ok(retired)
    }

    /// `head -> owner` listing for run summaries.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("head map serializes")
    }
}

/// Mean logit vector of one class over its training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogitProfile {
    pub class: u32,
    pub mean_logits: Vec<f64>,
    pub count: usize,
}

/// Per-class average logits of the frozen model over the task's training
/// data (un-augmented, single pass).
pub fn compute_profiles(model: &Model, task: &TaskSpec) -> Result<Vec<ClassLogitProfile>> {
    if !model.is_frozen() {
        return Err(Error::State("profiles require a frozen model".into()));
    }
    let logits = model.logits(&task.train.all())?;
    let labels = task.train.labels();
    let heads = logits.row_len();
    let mut out = Vec::with_capacity(task.classes.len());
    for &c in &task.classes {
        let mut sum = vec![0.0; heads];
        let mut count = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == c {
                for (s, v) in sum.iter_mut().zip(logits.row(i)) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::State(format!("class {c} has no samples in task {}", task.index)));
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        out.push(ClassLogitProfile {
            class: c,
            mean_logits: sum,
            count,
        });
    }
    Ok(out)
}

/// Greedy one-to-one matching of rows (classes) to columns (candidate
/// heads) by descending score. Ties go to the lower head index, then the
/// lower class id. Returns the chosen column per row.
pub fn greedy_match(scores: &[Vec<f64>], heads: &[usize], classes: &[u32]) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..scores.len())
        .flat_map(|r| (0..heads.len()).map(move |c| (r, c)))
        .collect();
    pairs.sort_by(|&(r1, c1), &(r2, c2)| {
        scores[r2][c2]
            .total_cmp(&scores[r1][c1])
            .then(heads[c1].cmp(&heads[c2]))
            .then(classes[r1].cmp(&classes[r2]))
    });
    let mut row_done = vec![false; scores.len()];
    let mut col_done = vec![false; heads.len()];
    let mut choice = vec![usize::MAX; scores.len()];
    for (r, c) in pairs {
        if !row_done[r] && !col_done[c] {
            row_done[r] = true;
            col_done[c] = true;
            choice[r] = c;
        }
    }
    choice
}

/// Maps each profiled class onto the aux-owned head with its highest mean
/// logit; collisions go to the larger value and losers fall back to their
/// best remaining aux head. Task-owned and unassigned heads are never
/// candidates. Returns the `(class, head)` pairs in profile order.
pub fn assign_heads(profiles: &[ClassLogitProfile], head_map: &mut HeadMap) -> Result<Vec<(u32, usize)>> {
    let candidates = head_map.aux_heads();
    if candidates.len() < profiles.len() {
        return Err(Error::State(format!(
            "{} new classes but only {} auxiliary heads",
            profiles.len(),
            candidates.len()
        )));
    }
    if let Some(p) = profiles.iter().find(|p| p.mean_logits.len() != head_map.num_heads()) {
        return Err(Error::Dimension(format!(
            "profile of class {} has {} logits for {} heads",
            p.class,
            p.mean_logits.len(),
            head_map.num_heads()
        )));
    }
    let scores: Vec<Vec<f64>> = profiles
        .iter()
        .map(|p| candidates.iter().map(|&h| p.mean_logits[h]).collect())
        .collect();
    let classes: Vec<u32> = profiles.iter().map(|p| p.class).collect();
    let pairs: Vec<(u32, usize)> = greedy_match(&scores, &candidates, &classes)
        .into_iter()
        .zip(profiles)
        .map(|(c, p)| (p.class, candidates[c]))
        .collect();
    head_map.commit(&pairs)?;
    Ok(pairs)
}

/// Gives the task's classes the lowest-index heads not owned by a task.
pub fn sequential_assign(task: &TaskSpec, head_map: &mut HeadMap) -> Result<Vec<(u32, usize)>> {
    let free: Vec<usize> = (0..head_map.num_heads())
        .filter(|&h| !matches!(head_map.owner(h), HeadOwner::Task(_)))
        .collect();
    if free.len() < task.classes.len() {
        return Err(Error::State(format!(
            "task {} needs {} heads, {} remain",
            task.index,
            task.classes.len(),
            free.len()
        )));
    }
    let pairs: Vec<(u32, usize)> = task.classes.iter().copied().zip(free).collect();
    head_map.commit(&pairs)?;
    Ok(pairs)
}
