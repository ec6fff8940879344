use std::fmt::Write;

use pilotgrid::model::{Task, StateEvent};

const HEADERS: [&str; 5] = ["job_id", "name", "workflow", "application", "state"];
const SEP: &str = " | ";

fn cells(t: &Task) -> [String; 5] {
    [
        t.id.to_string(),
        t.name.clone(),
        t.workflow.clone(),
        t.application.clone(),
        t.state.to_string(),
    ]
}

/// Renders the task table: right-aligned headers, a rule, then one
/// left-aligned row per task. Columns are as wide as their widest cell.
pub fn render(tasks: &[Task], history: bool) -> String {
    let rows: Vec<[String; 5]> = tasks.iter().map(cells).collect();
    let mut widths = HEADERS.map(str::len);
    widths[0] = widths[0].max(36);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let header: Vec<String> = HEADERS
        .iter()
        .zip(widths)
        .map(|(h, w)| format!("{h:>w$}"))
        .collect();
    out.push_str(&header.join(SEP));
    out.push('\n');
    let total = widths.iter().sum::<usize>() + SEP.len() * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for (row, task) in rows.iter().zip(tasks) {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        out.push_str(line.join(SEP).trim_end());
        out.push('\n');
        if history {
            for ev in &task.state_history {
                push_event(&mut out, ev);
            }
        }
    }
    out
}

fn push_event(out: &mut String, ev: &StateEvent) {
    let ts = ev.timestamp.format("%Y-%m-%d %H:%M:%S%.6f");
    if ev.message.is_empty() {
        let _ = writeln!(out, "    {ts}  {}", ev.state);
    } else {
        let mut lines = ev.message.lines();
        let first = lines.next().unwrap_or_default();
        let _ = writeln!(out, "    {ts}  {:<16}  {first}", ev.state.as_str());
        for more in lines {
            let _ = writeln!(out, "    {:26}  {:16}  {more}", "", "");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pilotgrid::model::TaskState;
    use uuid::Uuid;

    fn task(id: &str, name: &str, app: &str, state: TaskState) -> Task {
        let mut t = Task::new(name, "sample", app);
        t.id = Uuid::parse_str(id).unwrap();
        t.state = state;
        t
    }

    #[test]
    fn diamond_table() {
        let tasks = [
            task("d487a785-3ff1-4702-aff9-d6f1f88dd795", "A", "generate", TaskState::JobFinished),
            task("94905135-b47d-439f-9561-6c16290112db", "B", "simulate", TaskState::JobFinished),
            task("c04942d2-4926-4324-ad6e-b9c729d9f62b", "C", "simulate", TaskState::Running),
            task("19b130c3-50df-497c-a740-8c987c6b8e19", "D", "simulate", TaskState::Running),
            task("15df7441-4fb9-4537-af96-5f91453b7f3a", "E", "reduce", TaskState::AwaitingParents),
        ];
        let expected = "                              job_id | name | workflow | application |            state
---------------------------------------------------------------------------------------
d487a785-3ff1-4702-aff9-d6f1f88dd795 | A    | sample   | generate    | JOB_FINISHED
94905135-b47d-439f-9561-6c16290112db | B    | sample   | simulate    | JOB_FINISHED
c04942d2-4926-4324-ad6e-b9c729d9f62b | C    | sample   | simulate    | RUNNING
19b130c3-50df-497c-a740-8c987c6b8e19 | D    | sample   | simulate    | RUNNING
15df7441-4fb9-4537-af96-5f91453b7f3a | E    | sample   | reduce      | AWAITING_PARENTS
";
        assert_eq!(render(&tasks, false), expected);
    }

    #[test]
    fn empty_table_is_header_only() {
        let out = render(&[], false);
        assert_eq!(out.lines().count(), 2);
        assert!(out.starts_with("                              job_id | name |"));
    }

    #[test]
    fn long_names_widen_columns() {
        let t = task("d487a785-3ff1-4702-aff9-d6f1f88dd795", "a-much-longer-name", "x", TaskState::Ready);
        let out = render(&[t], false);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0].find("| workflow"), lines[2].find("| sample"));
    }
}
