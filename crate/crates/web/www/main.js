import init, { quantizerCurves, gainTracking, lossTraces } from "./pkg/qatlab_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function frame(canvas, xs, series, logY = false) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 36;
  ctx.clearRect(0, 0, w, h);
  const ys = series.flatMap((s) => Array.from(s.y)).filter(Number.isFinite);
  const f = logY ? (v) => Math.log10(Math.max(v, 1e-12)) : (v) => v;
  let lo = Math.min(...ys.map(f)), hi = Math.max(...ys.map(f));
  if (hi - lo < 1e-9) { lo -= 1; hi += 1; }
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0)) * (w - 2 * pad);
  const py = (y) => h - pad - ((f(y) - lo) / (hi - lo)) * (h - 2 * pad);
  ctx.strokeStyle = "#ddd";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#666";
  ctx.font = "11px sans-serif";
  ctx.fillText((logY ? "1e" : "") + hi.toFixed(2), 2, pad + 4);
  ctx.fillText((logY ? "1e" : "") + lo.toFixed(2), 2, h - pad);
  ctx.fillText(String(+x0.toFixed(2)), pad, h - pad + 14);
  ctx.fillText(String(+x1.toFixed(2)), w - pad - 20, h - pad + 14);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = s.width ?? 1.5;
    ctx.beginPath();
    s.y.forEach((y, i) => (i ? ctx.lineTo(px(xs[i]), py(y)) : ctx.moveTo(px(xs[i]), py(y))));
    ctx.stroke();
  }
}

function guarded(fn) {
  return () => {
    $("status").textContent = "";
    try {
      fn();
    } catch (e) {
      $("status").textContent = String(e.message ?? e);
      $("status").className = "err";
    }
  };
}

function drawCurves() {
  const step = num("q-step");
  const rows = quantizerCurves($("q-bits").value, step, 3 * step, 241, num("q-samples"), 1n);
  const pick = (k) => rows.filter((_, i) => i % 4 === k);
  frame($("q-plot"), pick(0), [
    { y: pick(1), color: "#444" },
    { y: pick(2), color: "#1a7" },
    { y: pick(3).map((j) => j * step), color: "#c40" },
  ]);
}

function drawGains() {
  const out = gainTracking(num("g-share"), num("g-updates"), num("g-beta"), 7n);
  const target = out[0];
  const gains = out.slice(1);
  const xs = gains.map((_, i) => i + 1);
  frame($("g-plot"), xs, [
    { y: gains, color: "#36c", width: 1 },
    { y: gains.map(() => target), color: "#c40" },
  ]);
}

function drawLosses() {
  const steps = num("l-steps");
  const out = lossTraces(num("l-frac"), steps, num("l-eta"), BigInt(num("l-seed")));
  const ste = out.slice(0, steps);
  const learned = out.slice(steps);
  frame($("l-plot"), ste.map((_, i) => i + 1), [
    { y: ste, color: "#888", width: 1 },
    { y: learned, color: "#36c", width: 1 },
  ], true);
  $("l-summary").textContent =
    `final loss: STE ${ste[steps - 1].toFixed(4)}, learned gains ${learned[steps - 1].toFixed(4)}`;
}

await init();
$("q-run").onclick = guarded(drawCurves);
$("g-run").onclick = guarded(drawGains);
$("l-run").onclick = guarded(drawLosses);
guarded(drawCurves)();
guarded(drawGains)();
