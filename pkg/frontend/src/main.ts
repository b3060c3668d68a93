import { ApiClient } from "./api.js";
import { DEBOUNCE_MS, Editor } from "./editor.js";
import { emptyPanel, parsePanel, type PanelInput } from "./panel.js";
import { view, type ViewModel } from "./render.js";
import type { EditorState } from "./state.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const noteArea = el<HTMLTextAreaElement>("note");
const underlay = el<HTMLDivElement>("underlay");
const rowsList = el<HTMLUListElement>("suggestions");
const statusBar = el<HTMLSpanElement>("status");
const toastBox = el<HTMLDivElement>("toast");

let toastTimer: ReturnType<typeof setTimeout> | null = null;

/** Rebuild the underlay: flagged runs underlined, ghost text at the caret. */
function renderUnderlay(vm: ViewModel, caret: number): void {
  underlay.textContent = "";
  let at = 0;
  let ghostPlaced = vm.ghost === null;

  const put = (text: string, flagged: boolean, tip: string) => {
    const span = document.createElement("span");
    span.textContent = text;
    if (flagged) {
      span.className = "flag";
      if (tip) span.dataset.tip = tip;
    }
    underlay.appendChild(span);
  };

  for (const seg of vm.segments) {
    const tip = seg.suggestions.map((s) => s.text.trim()).join(" · ");
    if (!ghostPlaced && caret >= at && caret <= at + seg.text.length) {
      const cut = caret - at;
      put(seg.text.slice(0, cut), seg.flagged, tip);
      const ghost = document.createElement("span");
      ghost.className = "ghost";
      ghost.textContent = vm.ghost;
      underlay.appendChild(ghost);
      put(seg.text.slice(cut), seg.flagged, tip);
      ghostPlaced = true;
    } else {
      put(seg.text, seg.flagged, tip);
    }
    at += seg.text.length;
  }
  if (!ghostPlaced) {
    const ghost = document.createElement("span");
    ghost.className = "ghost";
    ghost.textContent = vm.ghost;
    underlay.appendChild(ghost);
  }
  underlay.appendChild(document.createTextNode("\n")); // keep last line height
}

function renderRows(vm: ViewModel): void {
  rowsList.textContent = "";
  for (const [i, row] of vm.rows.entries()) {
    const li = document.createElement("li");
    const text = document.createElement("code");
    text.textContent = row.text;
    const prob = document.createElement("small");
    prob.textContent = row.prob;
    li.append(text, prob);
    if (i === 0) li.className = "top";
    rowsList.appendChild(li);
  }
  rowsList.hidden = vm.rows.length === 0;
}

function showToast(message: string): void {
  toastBox.textContent = message;
  toastBox.hidden = false;
  if (toastTimer) clearTimeout(toastTimer);
  toastTimer = setTimeout(() => {
    toastBox.hidden = true;
  }, 4000);
}

function render(state: EditorState): void {
  const vm = view(state);
  renderUnderlay(vm, state.caret);
  renderRows(vm);
  statusBar.textContent = vm.status;
  if (vm.toast) showToast(vm.toast);
}

// same-origin by default; ?api=http://host:port points elsewhere
const api = new ApiClient(new URLSearchParams(window.location.search).get("api") ?? "");
const editor = new Editor(api, undefined, render, DEBOUNCE_MS);

noteArea.addEventListener("input", () => {
  editor.input(noteArea.value, noteArea.selectionStart ?? noteArea.value.length);
});
noteArea.addEventListener("click", () => {
  editor.moveCaret(noteArea.selectionStart ?? 0);
});
noteArea.addEventListener("keyup", (ev) => {
  if (["ArrowLeft", "ArrowRight", "ArrowUp", "ArrowDown", "Home", "End"].includes(ev.key)) {
    editor.moveCaret(noteArea.selectionStart ?? 0);
  }
});
noteArea.addEventListener("scroll", () => {
  underlay.scrollTop = noteArea.scrollTop;
  underlay.scrollLeft = noteArea.scrollLeft;
});
noteArea.addEventListener("keydown", (ev) => {
  if (ev.key === "Tab") {
    ev.preventDefault();
    void editor.acceptSuggestion().then(() => {
      const s = editor.getState();
      noteArea.value = s.note;
      noteArea.setSelectionRange(s.caret, s.caret);
      render(s);
    });
  }
});

// --- context panel -------------------------------------------------------

const fields: Record<keyof PanelInput, HTMLInputElement | HTMLTextAreaElement | HTMLSelectElement> = {
  noteType: el("f-note-type"),
  hint: el("f-hint"),
  gender: el("f-gender"),
  age: el("f-age"),
  meds: el("f-meds"),
  labs: el("f-labs"),
  pastNotes: el("f-past"),
};

el<HTMLButtonElement>("apply-context").addEventListener("click", () => {
  const input = { ...emptyPanel() };
  for (const k of Object.keys(fields) as (keyof PanelInput)[]) {
    input[k] = fields[k].value;
  }
  const { context, errors } = parsePanel(input);
  for (const k of Object.keys(fields) as (keyof PanelInput)[]) {
    const err = document.getElementById(`err-${fields[k].id}`);
    if (err) err.textContent = errors[k] ?? "";
  }
  if (context) editor.applyContext(context);
});

// --- boot ----------------------------------------------------------------

api
  .health()
  .then((h) => {
    statusBar.textContent =
      h.status === "ready" ? `model ${h.model_id}` : "model loading…";
  })
  .catch(() => {
    statusBar.textContent = "service unreachable";
  });

render(editor.getState());
