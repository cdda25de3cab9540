#include "hcvt/types.hpp"

namespace hcvt {

Sequence sequence_from_string(const std::string& s) {
    if (s == "adc" || s == "ADC") return Sequence::ADC;
    if (s == "t2" || s == "T2") return Sequence::T2;
    if (s == "dwi" || s == "DWI") return Sequence::DWI;
    throw validation_error(strfmt("unknown MRI sequence '%s' (expected adc|t2|dwi)", s.c_str()));
}

void validate_clinical(const ClinicalRecord& r) {
    if (r.age < 18 || r.age > 100)
        throw validation_error(strfmt("patient %s: age %d outside [18,100]", r.patient_id.c_str(), r.age));
    if (r.hospitalizations < 1)
        throw validation_error(strfmt("patient %s: hospitalizations %d must be >= 1",
                                      r.patient_id.c_str(), r.hospitalizations));
    if (!(r.tumor_size_cm > 0.0) || r.tumor_size_cm > 15.0)
        throw validation_error(strfmt("patient %s: tumor size %.3f cm outside (0,15]",
                                      r.patient_id.c_str(), r.tumor_size_cm));
    if (r.t_stage < 0 || r.t_stage > 5)
        throw validation_error(strfmt("patient %s: t_stage %d outside {0..5}", r.patient_id.c_str(),
                                      r.t_stage));
    if (r.label != 0 && r.label != 1)
        throw validation_error(strfmt("patient %s: label %d must be binary", r.patient_id.c_str(),
                                      r.label));
}

}  // namespace hcvt
