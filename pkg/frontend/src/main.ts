/** Weight-mixer panel: pickers, per-modality weight sliders, generate, history. */

import { ApiClient } from "./api.js";
import { parseObj } from "./obj.js";
import {
  HistoryEntry, MixerState, MODALITIES, Modality, SLIDER_MAX_POS,
  buildRequestBody, canSubmit, initialState, sliderToWeight,
} from "./state.js";
import { WireViewer } from "./viewer.js";

const API_BASE = (window as unknown as { MIXER_API?: string }).MIXER_API
  ?? `${location.protocol}//${location.hostname}:8642`;

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const state: MixerState = initialState();
const history: HistoryEntry[] = [];
let inFlight = false;

const api = new ApiClient(API_BASE);
let viewer: WireViewer;
let previewViewer: WireViewer;
const previews = new Map<string, string>();

function setStatus(text: string, kind: "idle" | "busy" | "error" = "idle"): void {
  const el = $("status");
  el.textContent = text;
  el.className = `status ${kind}`;
}

function refreshControls(): void {
  for (const m of MODALITIES) {
    const label = $(`weight-${m}-value`);
    label.textContent = sliderToWeight(state.sliderPos[m]).toFixed(1);
  }
  ($("generate") as HTMLButtonElement).disabled = inFlight || !canSubmit(state);
}

function renderHistory(): void {
  const list = $("history");
  list.innerHTML = "";
  history.forEach((entry, i) => {
    const li = document.createElement("li");
    li.className = entry.state;
    const span = document.createElement("span");
    span.textContent = `#${i + 1} ${entry.label}`;
    const btn = document.createElement("button");
    btn.textContent = "resubmit";
    btn.addEventListener("click", () => void generate(entry.body));
    li.append(span, btn);
    list.appendChild(li);
  });
}

async function generate(bodyBytes?: string): Promise<void> {
  if (inFlight) return;
  const body = bodyBytes ?? buildRequestBody(state);
  const label = summarize(body);
  inFlight = true;
  refreshControls();
  try {
    setStatus("submitting...", "busy");
    const jobId = await api.submitWithRetry(body, {
      onBusy: (n) => setStatus(`service busy, retrying (${n})...`, "busy"),
    });
    setStatus(`job ${jobId} running...`, "busy");
    const view = await api.pollJob(jobId, {
      onProgress: (p) => setStatus(`job ${jobId}: ${(p * 100).toFixed(0)}%`, "busy"),
    });
    if (view.state === "failed") {
      setStatus(`job failed: ${view.error ?? "unknown error"}`, "error");
      history.push({ body, label, state: "failed" });
    } else {
      viewer.setMesh(parseObj(view.mesh ?? ""));
      setStatus(`done in ${elapsed(view)}s`, "idle");
      history.push({ body, label, state: "done" });
    }
  } catch (e) {
    setStatus(e instanceof Error ? e.message : String(e), "error");
  } finally {
    inFlight = false;
    refreshControls();
    renderHistory();
  }
}

function elapsed(view: { timings: Record<string, number> }): string {
  const { started_at, finished_at } = view.timings;
  return started_at && finished_at ? (finished_at - started_at).toFixed(1) : "?";
}

function summarize(body: string): string {
  const req = JSON.parse(body) as {
    conditions: { modality: string; weight: number }[];
    seed: number;
  };
  const parts = req.conditions.map((c) => `${c.modality}:${c.weight}`);
  return `${parts.join(" ") || "unconditional"} seed=${req.seed}`;
}

async function loadCatalog(): Promise<void> {
  setStatus("loading catalog...", "busy");
  try {
    const cat = await api.catalog();
    const classSel = $("class-select") as HTMLSelectElement;
    classSel.innerHTML = '<option value="">(none)</option>';
    for (const c of cat.classes) {
      const opt = document.createElement("option");
      opt.value = c;
      opt.textContent = c;
      classSel.appendChild(opt);
    }
    const kwBox = $("keywords");
    kwBox.innerHTML = "";
    const textInputDisabled = cat.keywords.length === 0;
    ($("text-note") as HTMLElement).textContent =
      textInputDisabled ? "(no keywords available)" : "";
    for (const w of cat.keywords) {
      const lab = document.createElement("label");
      const cb = document.createElement("input");
      cb.type = "checkbox";
      cb.value = w;
      cb.disabled = textInputDisabled;
      cb.addEventListener("change", () => {
        state.keywords = Array.from(
          kwBox.querySelectorAll<HTMLInputElement>("input:checked"),
        ).map((x) => x.value);
        refreshControls();
      });
      lab.append(cb, w);
      kwBox.appendChild(lab);
    }
    const partialSel = $("partial-select") as HTMLSelectElement;
    partialSel.innerHTML = '<option value="">(none)</option>';
    for (const p of cat.partial_shapes) {
      const opt = document.createElement("option");
      opt.value = p.id;
      opt.textContent = `${p.id}${p.category ? ` (${p.category})` : ""}`;
      partialSel.appendChild(opt);
      previews.set(p.id, p.preview);
    }
    setStatus("ready");
  } catch (e) {
    setStatus(`catalog failed: ${e instanceof Error ? e.message : e} - retry?`, "error");
    $("retry-catalog").style.display = "inline";
  }
}

function wireControls(): void {
  ($("class-select") as HTMLSelectElement).addEventListener("change", (e) => {
    const v = (e.target as HTMLSelectElement).value;
    state.selectedClass = v || null;
    refreshControls();
  });
  ($("partial-select") as HTMLSelectElement).addEventListener("change", (e) => {
    const v = (e.target as HTMLSelectElement).value;
    state.partialId = v || null;
    previewViewer.setMesh(v && previews.get(v) ? parseObj(previews.get(v)!) : null);
    refreshControls();
  });
  ($("silhouette-toggle") as HTMLInputElement).addEventListener("change", (e) => {
    state.silhouetteOn = (e.target as HTMLInputElement).checked;
    refreshControls();
  });
  ($("unconditional-toggle") as HTMLInputElement).addEventListener("change", (e) => {
    state.unconditional = (e.target as HTMLInputElement).checked;
    refreshControls();
  });
  for (const m of MODALITIES) {
    const slider = $(`weight-${m}`) as HTMLInputElement;
    slider.min = "0";
    slider.max = String(SLIDER_MAX_POS);
    slider.step = "1";
    slider.value = String(state.sliderPos[m]);
    slider.addEventListener("input", () => {
      state.sliderPos[m as Modality] = parseInt(slider.value, 10);
      refreshControls();
    });
  }
  ($("seed") as HTMLInputElement).addEventListener("change", (e) => {
    state.seed = parseInt((e.target as HTMLInputElement).value, 10) || 0;
  });
  $("generate").addEventListener("click", () => void generate());
  $("retry-catalog").addEventListener("click", () => void loadCatalog());
}

export function boot(): void {
  viewer = new WireViewer($("viewport") as HTMLCanvasElement);
  previewViewer = new WireViewer($("preview") as HTMLCanvasElement, "#fc6");
  wireControls();
  refreshControls();
  void loadCatalog();
}

if (typeof document !== "undefined" && document.getElementById("viewport")) {
  boot();
}
