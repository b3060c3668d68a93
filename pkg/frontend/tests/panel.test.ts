import { describe, expect, it } from "vitest";
import { emptyPanel, parsePanel } from "../src/panel.js";

describe("parsePanel", () => {
  it("empty form yields a context with empty lists", () => {
    const { context, errors } = parsePanel(emptyPanel());
    expect(errors).toEqual({});
    expect(context).toEqual({
      hint: "",
      note_type: "",
      gender: "",
      age_years: 0,
      meds: [],
      labs: [],
      past_notes: [],
    });
  });

  it("rejects a non-integer age inline", () => {
    const { context, errors } = parsePanel({ ...emptyPanel(), age: "sixty" });
    expect(context).toBeNull();
    expect(errors.age).toMatch(/whole number/);
  });

  it("parses a filled form", () => {
    const { context, errors } = parsePanel({
      noteType: "Progress note",
      hint: "Admission Date",
      gender: "F",
      age: "61",
      meds: "Heparin\n  Lisinopril  \n",
      labs: "Sodium,140,mmol/L\nWBC,11.2,K/uL,abnormal",
      pastNotes: "First note.\n\nSecond note, day two.",
    });
    expect(errors).toEqual({});
    expect(context).toMatchObject({
      gender: "F",
      age_years: 61,
      meds: ["Heparin", "Lisinopril"],
      labs: [
        { label: "Sodium", value: "140", unit: "mmol/L", flag: "" },
        { label: "WBC", value: "11.2", unit: "K/uL", flag: "abnormal" },
      ],
      past_notes: ["First note.", "Second note, day two."],
    });
  });

  it("flags a lab line with a missing unit", () => {
    const { context, errors } = parsePanel({ ...emptyPanel(), labs: "Sodium,140" });
    expect(context).toBeNull();
    expect(errors.labs).toMatch(/label,value,unit/);
    expect(errors.labs).toMatch(/line 1/);
  });
});
