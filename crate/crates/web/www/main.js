import init, { run_scenario, aimd_trace, compare_policies } from "./pkg/trendfuzz_web.js";

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = String(e.message ?? e);
  el.appendChild(p);
}

function drawCoverage(view) {
  const c = $("coverage");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const rows = view.series;
  if (rows.length === 0) return;
  const names = [...view.fuzzers, "union"];
  const tMax = rows[rows.length - 1][0];
  const yMax = Math.max(1, ...rows.map((r) => r[r.length - 1]));
  const pad = 40;
  const x = (t) => pad + (t / tMax) * (c.width - 2 * pad);
  const y = (v) => c.height - pad - (v / yMax) * (c.height - 2 * pad);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  g.fillStyle = "#444";
  g.fillText(`${yMax} branches`, 4, pad - 6);
  g.fillText(`${tMax} CPU s`, c.width - pad - 60, c.height - pad + 16);
  names.forEach((name, i) => {
    const color = name === "union" ? "#000" : COLORS[i % COLORS.length];
    g.strokeStyle = color;
    g.lineWidth = name === "union" ? 2 : 1;
    g.beginPath();
    rows.forEach((r, k) => (k ? g.lineTo(x(r[0]), y(r[i + 1])) : g.moveTo(x(r[0]), y(r[i + 1]))));
    g.stroke();
    g.fillStyle = color;
    g.fillText(name, pad + 10 + i * 90, c.height - 8);
  });
}

function drawHeatmap(view) {
  const c = $("heatmap");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const rounds = view.rounds;
  if (rounds.length === 0) return;
  const left = 80;
  const w = (c.width - left) / rounds.length;
  const h = c.height / view.fuzzers.length;
  view.fuzzers.forEach((f, j) => {
    g.fillStyle = "#444";
    g.fillText(f, 4, j * h + h / 2 + 4);
    rounds.forEach((r, i) => {
      const a = r.allocation[f] ?? 0;
      g.fillStyle = `rgba(31, 119, 180, ${a})`;
      g.fillRect(left + i * w, j * h, Math.max(1, w - 1), h - 1);
    });
  });
}

function table(head, rows) {
  const t = document.createElement("table");
  const tr = t.insertRow();
  for (const h of head) {
    const th = document.createElement("th");
    th.textContent = h;
    tr.appendChild(th);
  }
  for (const r of rows) {
    const row = t.insertRow();
    for (const v of r) row.insertCell().textContent = v;
  }
  return t;
}

function onRun() {
  const out = $("run-out");
  try {
    const view = JSON.parse(
      run_scenario($("scenario").value, $("policy").value, Number($("budget").value),
        Number($("cores").value), Number($("seed").value)));
    drawCoverage(view);
    drawHeatmap(view);
    out.innerHTML = "";
    const p = document.createElement("p");
    p.textContent = `${view.rounds.length} rounds, union ${view.union_count} branches, density ${view.final_density.toFixed(5)}`;
    out.appendChild(p);
    out.appendChild(table(
      ["round", "winner", "diff peak", "threshold", "prep s", "focus s"],
      view.rounds.map((r) => [r.round, r.winner, r.diff_peak, r.theta.toFixed(2), r.t_prep_actual, r.t_focus_assigned])));
  } catch (e) {
    fail(out, e);
  }
}

function onTrace() {
  try {
    const t = JSON.parse(aimd_trace($("exits").value, Number($("theta").value)));
    $("trace-out").textContent = t.map((v, i) => `round ${i + 1}: ${v}`).join("\n");
  } catch (e) {
    $("trace-out").textContent = String(e.message ?? e);
  }
}

function onCompare() {
  const out = $("compare-out");
  try {
    const v = JSON.parse(compare_policies($("scenario").value, Number($("budget").value), Number($("seeds").value)));
    out.innerHTML = "";
    const p = document.createElement("p");
    p.textContent = `autofz ahead on ${v.autofz_wins} of ${v.seeds} seeds`;
    out.appendChild(p);
    out.appendChild(table(["seed", "autofz", "roundrobin"],
      v.autofz.map((a, i) => [i, a.toFixed(5), v.roundrobin[i].toFixed(5)])));
  } catch (e) {
    fail(out, e);
  }
}

await init();
$("run").onclick = onRun;
$("trace").onclick = onTrace;
$("compare").onclick = onCompare;
onRun();
