import type { LabJson, RecordContextJson } from "./types.js";

/** Raw text of the context-panel form fields. */
export interface PanelInput {
  noteType: string;
  hint: string;
  gender: string;
  age: string;
  meds: string; // one per line
  labs: string; // label,value,unit[,flag] per line
  pastNotes: string; // separated by blank lines
}

export interface PanelResult {
  context: RecordContextJson | null;
  errors: Partial<Record<keyof PanelInput, string>>;
}

export function emptyPanel(): PanelInput {
  return { noteType: "", hint: "", gender: "", age: "", meds: "", labs: "", pastNotes: "" };
}

function lines(text: string): string[] {
  return text
    .split("\n")
    .map((l) => l.trim())
    .filter((l) => l.length > 0);
}

/** Validate the form and assemble the service's context JSON. */
export function parsePanel(input: PanelInput): PanelResult {
  const errors: PanelResult["errors"] = {};

  const age = input.age.trim();
  if (age !== "" && !/^\d+$/.test(age)) {
    errors.age = "age must be a whole number";
  }

  const labs: LabJson[] = [];
  for (const [i, line] of lines(input.labs).entries()) {
    const parts = line.split(",").map((p) => p.trim());
    if (parts.length < 3 || parts.slice(0, 3).some((p) => p === "")) {
      errors.labs = `lab line ${i + 1} needs label,value,unit`;
      break;
    }
    labs.push({
      label: parts[0]!,
      value: parts[1]!,
      unit: parts[2]!,
      flag: parts[3] ?? "",
    });
  }

  if (Object.keys(errors).length > 0) return { context: null, errors };

  return {
    context: {
      hint: input.hint,
      note_type: input.noteType,
      gender: input.gender,
      age_years: age === "" ? 0 : parseInt(age, 10),
      meds: lines(input.meds),
      labs,
      past_notes: input.pastNotes
        .split(/\n{2,}/)
        .map((n) => n.trim())
        .filter((n) => n.length > 0),
    },
    errors,
  };
}
