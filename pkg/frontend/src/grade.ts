/**
 * Grade capture model: the five color-phrased categories plus the two
 * flags, mirroring the server's submission schema field for field.
 */

import { GRADE_CATEGORIES, type GradeCategory, type WireGrade } from "./api.js";

export interface GradeInput {
  category: GradeCategory | null;
  gradable: boolean;
  atLeastOneAccurate: boolean;
}

export function emptyGrade(): GradeInput {
  return { category: null, gradable: true, atLeastOneAccurate: true };
}

/** Category for a 1-based keyboard slot (keys 1-5), null outside it. */
export function categoryForSlot(slot: number): GradeCategory | null {
  if (!Number.isInteger(slot) || slot < 1 || slot > GRADE_CATEGORIES.length) {
    return null;
  }
  return GRADE_CATEGORIES[slot - 1];
}

/** Human text for a category id ("blue slightly better"). */
export function categoryLabel(category: GradeCategory): string {
  return category.replace(/_/g, " ");
}

/** Why the grade cannot be submitted yet, or null when it can. */
export function validateGrade(input: GradeInput): string | null {
  if (input.gradable && input.category === null) {
    return "pick a category (keys 1-5) or mark the region ungradable (U)";
  }
  if (!input.gradable && input.category !== null) {
    return "an ungradable region cannot carry a category";
  }
  return null;
}

export function toWireGrade(input: GradeInput, overwrite = false): WireGrade {
  const payload: WireGrade = {
    grade: input.gradable ? input.category : null,
    gradable: input.gradable,
    at_least_one_accurate: input.atLeastOneAccurate,
  };
  if (overwrite) {
    payload.overwrite = true;
  }
  return payload;
}
