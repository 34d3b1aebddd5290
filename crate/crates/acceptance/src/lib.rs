//! Home of the `acceptance` test target, which runs every acceptance
//! criterion and prints one PASS/FAIL line for each.
